//! Class-conditional generator of paired images and metadata with separately
//! controlled informativeness per modality.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Array;
use crate::encoders::{Column, MetaValue, MetadataSchema};
use crate::error::{Error, Result};

/// Which modality carries the class signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Complementarity {
    /// Both modalities identify the class.
    Redundant,
    /// The image identifies a super-class, the metadata the member within it.
    #[default]
    Complementary,
    ImageOnly,
    MetaOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Class `c` receives `samples_per_class · (1 − imbalance · c/(N−1))`
    /// samples, so 0 gives balanced classes.
    pub imbalance: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub alpha_img: f64,
    pub alpha_meta: f64,
    pub mode: Complementarity,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Probability that a metadata cell is left empty.
    pub missing_rate: f64,
    /// Super-class count in complementary mode, `N/2` when absent.
    pub super_classes: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            samples_per_class: 60,
            imbalance: 0.5,
            channels: 3,
            height: 32,
            width: 32,
            alpha_img: 0.8,
            alpha_meta: 0.8,
            mode: Complementarity::Complementary,
            noise: 0.1,
            missing_rate: 0.05,
            super_classes: None,
            seed: 0,
        }
    }
}

const LESION_CLASSES: [&str; 6] = ["ACK", "BCC", "MEL", "NEV", "SCC", "SEK"];
const SITES: [&str; 8] = ["arm", "back", "chest", "face", "forearm", "hand", "leg", "neck"];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be at least 1".into());
        }
        for (name, v) in [
            ("alpha_img", self.alpha_img),
            ("alpha_meta", self.alpha_meta),
            ("imbalance", self.imbalance),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.imbalance >= 1.0 {
            return bad("imbalance must be below 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.mode == Complementarity::Complementary {
            let s = self.super_class_count();
            if s < 1 || s >= self.classes {
                return bad(format!(
                    "complementary mode needs 1 <= super classes < {} classes, got {s}",
                    self.classes
                ));
            }
        }
        Ok(())
    }

    pub fn super_class_count(&self) -> usize {
        self.super_classes.unwrap_or(self.classes / 2)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let shrink = self.imbalance * c as f64 / (n - 1) as f64;
                ((self.samples_per_class as f64 * (1.0 - shrink)).round() as usize).max(1)
            })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.classes == LESION_CLASSES.len() {
            LESION_CLASSES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.classes).map(|c| format!("C{c}")).collect()
        }
    }

    /// Index of the image template shown for class `c`, if images carry signal.
    pub fn image_target(&self, c: usize) -> Option<usize> {
        match self.mode {
            Complementarity::Redundant | Complementarity::ImageOnly => Some(c),
            Complementarity::Complementary => Some(c % self.super_class_count()),
            Complementarity::MetaOnly => None,
        }
    }

    /// Metadata value index favoured by class `c`, if metadata carries signal.
    pub fn meta_target(&self, c: usize) -> Option<usize> {
        match self.mode {
            Complementarity::Redundant | Complementarity::MetaOnly => Some(c),
            Complementarity::Complementary => Some(c / self.super_class_count()),
            Complementarity::ImageOnly => None,
        }
    }

    fn template_count(&self) -> usize {
        (0..self.classes).filter_map(|c| self.image_target(c)).max().map_or(1, |m| m + 1)
    }

    fn site_vocab(&self) -> Vec<String> {
        let needed = (0..self.classes).filter_map(|c| self.meta_target(c)).max().map_or(0, |m| m + 1);
        let mut vocab: Vec<String> = SITES.iter().map(|s| s.to_string()).collect();
        for i in vocab.len()..needed {
            vocab.push(format!("site{i}"));
        }
        vocab
    }

    pub fn schema(&self) -> MetadataSchema {
        let sites = self.site_vocab();
        let sites: Vec<&str> = sites.iter().map(String::as_str).collect();
        MetadataSchema {
            classes: self.class_names(),
            columns: vec![
                Column::categorical("region", &sites),
                Column::categorical("itch", &["False", "True"]),
                Column::categorical("grew", &["False", "True"]),
                Column::categorical("gender", &["FEMALE", "MALE"]),
                Column::numeric("age", 0.0, 100.0),
            ],
        }
    }
}

/// Pattern mask in {0, 1} of template `j`.
fn pattern(j: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let freq = 1 + j / 4;
    let on = match j % 4 {
        0 => (y * 2 * freq / h) % 2 == 0,
        1 => (x * 2 * freq / w) % 2 == 0,
        2 => {
            let dy = y as f64 + 0.5 - h as f64 / 2.0;
            let dx = x as f64 + 0.5 - w as f64 / 2.0;
            let r = (dy * dy + dx * dx).sqrt() / (h.min(w) as f64 / 2.0);
            ((r * freq as f64 * 1.5) as usize) % 2 == 0
        }
        _ => ((y * 2 * freq / h) + (x * 2 * freq / w)) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Colour of template `j` out of `count`, spread around the hue circle.
fn colour(j: usize, count: usize, channels: usize) -> Vec<f64> {
    let hue = j as f64 / count as f64;
    (0..channels)
        .map(|ch| {
            let phase = hue + ch as f64 / channels as f64;
            0.5 + 0.5 * (2.0 * std::f64::consts::PI * phase).cos()
        })
        .collect()
}

/// Noise-free `C×H×W` template of index `j`: foreground in the template
/// colour, background in its complement.
pub fn template(spec: &SyntheticSpec, j: usize) -> Array {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let col = colour(j, spec.template_count(), c);
    let mut data = Vec::with_capacity(c * h * w);
    for fg in &col {
        for y in 0..h {
            for x in 0..w {
                let p = pattern(j, y, x, h, w);
                data.push(p * fg + (1.0 - p) * (1.0 - fg));
            }
        }
    }
    Array::new(vec![c, h, w], data).expect("template shape")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn pick<R: Rng>(rng: &mut R, alpha: f64, target: Option<usize>, size: usize) -> usize {
    let random = rng.gen_range(0..size);
    match target {
        Some(t) if rng.gen::<f64>() < alpha => t,
        _ => random,
    }
}

/// Generates the dataset described by `spec`; a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = spec.schema();
    let sites = spec.site_vocab();
    let counts = spec.class_counts();
    let templates: Vec<Array> = (0..spec.template_count()).map(|j| template(spec, j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let plane = spec.channels * spec.height * spec.width;
    let total: usize = counts.iter().sum();
    let mut ids = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    let mut pixels = Vec::with_capacity(total * plane);
    for (c, &count) in counts.iter().enumerate() {
        let img_target = spec.image_target(c);
        let alpha_img = if img_target.is_some() { spec.alpha_img } else { 0.0 };
        let meta_target = spec.meta_target(c);
        for _ in 0..count {
            let tpl = img_target.map(|j| templates[j].data());
            for i in 0..plane {
                let signal = tpl.map_or(0.0, |t| t[i]);
                let mut v = alpha_img * signal + (1.0 - alpha_img) * rng.gen::<f64>();
                if spec.noise > 0.0 {
                    v += gauss.sample(&mut rng);
                }
                pixels.push(quantize(v));
            }
            let site = pick(&mut rng, spec.alpha_meta, meta_target, sites.len());
            let itch = pick(&mut rng, spec.alpha_meta, meta_target.map(|t| t & 1), 2);
            let grew = pick(&mut rng, spec.alpha_meta, meta_target.map(|t| (t >> 1) & 1), 2);
            let gender = rng.gen_range(0..2);
            let age = (rng.gen_range(20.0..85.0f64)).round();
            let bools = ["False", "True"];
            let mut record = vec![
                MetaValue::Text(sites[site].clone()),
                MetaValue::Text(bools[itch].into()),
                MetaValue::Text(bools[grew].into()),
                MetaValue::Text(["FEMALE", "MALE"][gender].into()),
                MetaValue::Number(age),
            ];
            for cell in &mut record {
                if rng.gen::<f64>() < spec.missing_rate {
                    *cell = MetaValue::Missing;
                }
            }
            ids.push(format!("syn_{:05}", ids.len()));
            labels.push(c);
            records.push(record);
        }
    }
    let images = Array::new(vec![total, spec.channels, spec.height, spec.width], pixels)?;
    Dataset::new(ids, images, records, labels, schema)
}
