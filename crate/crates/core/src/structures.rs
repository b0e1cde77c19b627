//! Model assembly: encoders, fusion and classifier heads arranged as the
//! image-only baseline, joint fusion (JF) or joint-individual fusion (JIF).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_into, Array, Graph, Var};
use crate::encoders::{ImageEncoder, ImageEncoderConfig, MetadataEncoder, MetadataEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{AttentionConfig, Fusion, FusionKind, Mmfa};
use crate::layers::{Linear, Mode};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Image,
    Jf,
    Jif,
}

/// Which prediction a JIF model is scored by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    /// Fusion branch only, `P_IM`.
    #[default]
    Ofb,
    /// Mean of `P_I`, `P_M` and `P_IM`.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub structure: Structure,
    pub fusion: FusionKind,
    pub classes: usize,
    pub image: ImageEncoderConfig,
    pub meta: MetadataEncoderConfig,
    pub heads: usize,
    #[serde(default)]
    pub literal_eq7: bool,
}

/// Encoders, fusion module and heads of one model. The parameters live in a
/// separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub meta_encoder: Option<MetadataEncoder>,
    pub fusion: Option<Fusion>,
    pub c_im: Option<Linear>,
    pub c_i: Option<Linear>,
    pub c_m: Option<Linear>,
}

/// Logits of every head present in the structure.
#[derive(Clone, Copy, Debug)]
pub struct HeadLogits {
    pub image: Option<Var>,
    pub meta: Option<Var>,
    pub fused: Option<Var>,
}

/// Per-head class probabilities, each `B×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTriple {
    pub p_i: Option<Array>,
    pub p_m: Option<Array>,
    pub p_im: Option<Array>,
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l_i: Option<Var>,
    pub l_m: Option<Var>,
    pub l_im: Option<Var>,
}

impl Model {
    /// Parameters are drawn in a fixed order (encoders, fusion, `C_IM`, then
    /// `C_I`, `C_M`), so a JF and a JIF model built from the same seed share
    /// every JF parameter.
    pub fn new<R: Rng>(config: ModelConfig, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", config.classes)));
        }
        let image_encoder = ImageEncoder::new(config.image.clone(), ps, rng)?;
        let d_i = image_encoder.output_dim();
        let n = config.classes;
        if config.structure == Structure::Image {
            let c_i = Linear::new(ps, "head.c_i", d_i, n, rng);
            return Ok(Self {
                config,
                image_encoder,
                meta_encoder: None,
                fusion: None,
                c_im: None,
                c_i: Some(c_i),
                c_m: None,
            });
        }
        let meta_encoder = MetadataEncoder::new(config.meta.clone(), ps, rng)?;
        let d_m = meta_encoder.output_dim();
        let fusion = match config.fusion {
            FusionKind::Cat => Fusion::Concat,
            FusionKind::Mmfa => {
                let attention = AttentionConfig {
                    heads: config.heads,
                    d_img: d_i,
                    d_meta: d_m,
                    literal_eq7: config.literal_eq7,
                };
                Fusion::Mmfa(Mmfa::new(attention, d_i, d_m, ps, rng)?)
            }
        };
        let c_im = Linear::new(ps, "head.c_im", d_i + d_m, n, rng);
        let (c_i, c_m) = if config.structure == Structure::Jif {
            (
                Some(Linear::new(ps, "head.c_i", d_i, n, rng)),
                Some(Linear::new(ps, "head.c_m", d_m, n, rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            image_encoder,
            meta_encoder: Some(meta_encoder),
            fusion: Some(fusion),
            c_im: Some(c_im),
            c_i,
            c_m,
        })
    }

    pub fn structure(&self) -> Structure {
        self.config.structure
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Logits of every head. `meta` is ignored by the image-only structure.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, images: Var, meta: Var, mode: Mode) -> Result<HeadLogits> {
        let batch = g.shape(images).first().copied().unwrap_or(0);
        let f_i = self.image_encoder.forward(g, ps, images, mode)?;
        let (encoder, fusion) = match (&self.meta_encoder, &self.fusion) {
            (Some(e), Some(f)) => (e, f),
            (None, None) => {
                let head = self.c_i.as_ref().ok_or_else(|| Error::Config("image-only model without C_I".into()))?;
                return Ok(HeadLogits {
                    image: Some(head.forward(g, ps, f_i)?),
                    meta: None,
                    fused: None,
                });
            }
            _ => return Err(Error::Config("metadata encoder and fusion module must come together".into())),
        };
        if g.shape(meta).first().copied() != Some(batch) {
            return Err(Error::dim(
                "forward",
                format!("image batch {batch}, metadata {:?}", g.shape(meta)),
            ));
        }
        let f_m = encoder.forward(g, ps, meta, mode)?;
        let fused = fusion.forward(g, ps, f_i, f_m, mode)?;
        let c_im = self.c_im.as_ref().ok_or_else(|| Error::Config("fusion model without C_IM".into()))?;
        let fused = Some(c_im.forward(g, ps, fused)?);
        let image = self.c_i.as_ref().map(|h| h.forward(g, ps, f_i)).transpose()?;
        let meta = self.c_m.as_ref().map(|h| h.forward(g, ps, f_m)).transpose()?;
        if self.structure() == Structure::Jif && (image.is_none() || meta.is_none()) {
            return Err(Error::Config("JIF model needs C_I and C_M".into()));
        }
        Ok(HeadLogits { image, meta, fused })
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, ps: &ParamStore, images: &Array, meta: &Array) -> Result<PredictionTriple> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let m = g.constant(meta.clone());
        let logits = self.forward(&mut g, ps, x, m, Mode::Eval)?;
        Ok(logits.probabilities(&g))
    }
}

impl HeadLogits {
    pub fn probabilities(&self, g: &Graph) -> PredictionTriple {
        let p = |v: Option<Var>| v.map(|v| softmax_rows(g.value(v)));
        PredictionTriple {
            p_i: p(self.image),
            p_m: p(self.meta),
            p_im: p(self.fused),
        }
    }
}

fn softmax_rows(logits: &Array) -> Array {
    let width = logits.last_dim();
    let mut out = Array::zeros(logits.shape());
    for (row, o) in logits.data().chunks(width).zip(out.data_mut().chunks_mut(width)) {
        softmax_into(row, o);
    }
    out
}

impl PredictionTriple {
    /// Scores used for evaluation: `P_I` for image-only, `P_IM` for JF and
    /// JIF-OFB, the decision-level mean for JIF-All.
    pub fn scores(&self, structure: Structure, report: ReportMode) -> Result<Array> {
        let missing = |what: &str| Error::Contract(format!("{what} missing from prediction"));
        match (structure, report) {
            (Structure::Image, _) => self.p_i.clone().ok_or_else(|| missing("P_I")),
            (Structure::Jf, _) | (Structure::Jif, ReportMode::Ofb) => {
                self.p_im.clone().ok_or_else(|| missing("P_IM"))
            }
            (Structure::Jif, ReportMode::All) => decision_fuse(self),
        }
    }
}

/// Mean of `P_I`, `P_M` and `P_IM`.
pub fn decision_fuse(triple: &PredictionTriple) -> Result<Array> {
    let (Some(a), Some(b), Some(c)) = (&triple.p_i, &triple.p_m, &triple.p_im) else {
        return Err(Error::Contract("decision fusion needs P_I, P_M and P_IM".into()));
    };
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::dim(
            "decision_fuse",
            format!("{:?}, {:?}, {:?}", a.shape(), b.shape(), c.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((x, y), z)| (x + y + z) / 3.0)
        .collect();
    Array::new(a.shape().to_vec(), data)
}

/// `β·L_I + (1 − β)·L_M + L_IM`.
pub fn combine_losses(g: &mut Graph, l_i: Var, l_m: Var, l_im: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let a = g.scale(l_i, beta);
    let b = g.scale(l_m, 1.0 - beta);
    let ab = g.add(a, b)?;
    g.add(ab, l_im)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Class-weighted cross-entropy of every head and the structure's total.
pub fn total_loss(
    g: &mut Graph,
    structure: Structure,
    logits: &HeadLogits,
    labels: &[usize],
    weights: &[f64],
    beta: f64,
) -> Result<LossTerms> {
    check_beta(beta)?;
    let mut ce = |v: Option<Var>| v.map(|v| g.weighted_ce(v, labels, weights)).transpose();
    let l_i = ce(logits.image)?;
    let l_m = ce(logits.meta)?;
    let l_im = ce(logits.fused)?;
    let total = match (structure, l_i, l_m, l_im) {
        (Structure::Image, Some(l), _, _) => l,
        (Structure::Jf, _, _, Some(l)) => l,
        (Structure::Jif, Some(a), Some(b), Some(c)) => combine_losses(g, a, b, c, beta)?,
        _ => {
            return Err(Error::Contract(format!(
                "loss components missing for {structure:?}"
            )))
        }
    };
    Ok(LossTerms { total, l_i, l_m, l_im })
}

/// Inverse-frequency weights `w_c = total / (N · count_c)`.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Config("no classes to weight".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class {c} has no training samples; use a stratified split so every class is present"
        )));
    }
    let total: usize = counts.iter().sum();
    let n = counts.len() as f64;
    Ok(counts.iter().map(|&c| total as f64 / (n * c as f64)).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config(structure: Structure, fusion: FusionKind) -> ModelConfig {
        ModelConfig {
            structure,
            fusion,
            classes: 6,
            image: ImageEncoderConfig {
                channels: 3,
                height: 8,
                width: 8,
                block_channels: vec![4, 4],
                kernel: 3,
                d_img: 6,
            },
            meta: MetadataEncoderConfig {
                input_width: 5,
                hidden: vec![4],
                d_meta: 3,
            },
            heads: 3,
            literal_eq7: false,
        }
    }

    fn build(structure: Structure, fusion: FusionKind, seed: u64) -> (Model, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::new(toy_config(structure, fusion), &mut ps, &mut rng).unwrap();
        (m, ps)
    }

    fn batch(b: usize, seed: u64) -> (Array, Array) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = (0..b * 3 * 64).map(|_| rng.gen::<f64>()).collect();
        let meta = (0..b * 5).map(|_| rng.gen::<f64>()).collect();
        (
            Array::new(vec![b, 3, 8, 8], img).unwrap(),
            Array::new(vec![b, 5], meta).unwrap(),
        )
    }

    fn assert_simplex(p: &Array) {
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn heads_per_structure() {
        let (img, _) = build(Structure::Image, FusionKind::Mmfa, 1);
        assert!(img.c_i.is_some() && img.c_m.is_none() && img.c_im.is_none() && img.fusion.is_none());
        let (jf, _) = build(Structure::Jf, FusionKind::Mmfa, 1);
        assert!(jf.c_im.is_some() && jf.c_i.is_none() && jf.c_m.is_none());
        let (jif, _) = build(Structure::Jif, FusionKind::Cat, 1);
        assert!(jif.c_im.is_some() && jif.c_i.is_some() && jif.c_m.is_some());
    }

    #[test]
    fn zero_heads_predict_uniform() {
        let (m, mut ps) = build(Structure::Jif, FusionKind::Mmfa, 2);
        ps.zero_trainable(|n| n.starts_with("head."));
        let (x, meta) = batch(2, 3);
        let p = m.predict(&ps, &x, &meta).unwrap();
        for a in [p.p_i, p.p_m, p.p_im] {
            assert!(a.unwrap().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        }
    }

    #[test]
    fn seeded_forward_is_simplex_valued() {
        let (m, ps) = build(Structure::Jif, FusionKind::Mmfa, 4);
        let (x, meta) = batch(2, 5);
        let p = m.predict(&ps, &x, &meta).unwrap();
        for a in [&p.p_i, &p.p_m, &p.p_im] {
            let a = a.as_ref().unwrap();
            assert_eq!(a.shape(), &[2, 6]);
            assert_simplex(a);
        }
        assert_simplex(&p.scores(Structure::Jif, ReportMode::All).unwrap());
    }

    #[test]
    fn jif_fusion_branch_equals_jf() {
        for fusion in [FusionKind::Cat, FusionKind::Mmfa] {
            let (jf, ps_jf) = build(Structure::Jf, fusion, 6);
            let (jif, ps_jif) = build(Structure::Jif, fusion, 6);
            let (x, meta) = batch(3, 7);
            let a = jf.predict(&ps_jf, &x, &meta).unwrap();
            let b = jif.predict(&ps_jif, &x, &meta).unwrap();
            assert_eq!(a.p_im, b.p_im);
            assert!(a.p_i.is_none() && b.p_i.is_some());
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let mut g = Graph::new();
        let [a, b, c] = [2.0, 4.0, 1.0].map(|v| g.constant(Array::scalar(v)));
        let t = combine_losses(&mut g, a, b, c, 0.5).unwrap();
        assert_eq!(g.value(t).data(), &[4.0]);
        let t0 = combine_losses(&mut g, a, b, c, 0.0).unwrap();
        assert_eq!(g.value(t0).data(), &[5.0]);
        let t1 = combine_losses(&mut g, a, b, c, 1.0).unwrap();
        assert_eq!(g.value(t1).data(), &[3.0]);
        assert!(matches!(combine_losses(&mut g, a, b, c, 1.5), Err(Error::Config(_))));
    }

    fn c_i_gradient(beta: f64) -> Vec<f64> {
        let (m, ps) = build(Structure::Jif, FusionKind::Mmfa, 8);
        let (x, meta) = batch(4, 9);
        let mut g = Graph::new();
        let (xv, mv) = (g.constant(x), g.constant(meta));
        let logits = m.forward(&mut g, &ps, xv, mv, Mode::Train).unwrap();
        let weights = [1.0, 2.0, 0.5, 1.0, 1.5, 1.0];
        let loss = total_loss(&mut g, Structure::Jif, &logits, &[0, 3, 5, 1], &weights, beta).unwrap();
        g.backward(loss.total).unwrap();
        let head = m.c_i.as_ref().unwrap();
        let mut grad = g.param_grad(head.weight).unwrap().to_vec();
        grad.extend_from_slice(g.param_grad(head.bias).unwrap());
        grad
    }

    #[test]
    fn beta_scales_the_image_head_gradient() {
        let g0 = c_i_gradient(0.0);
        assert!(g0.iter().all(|&v| v == 0.0));
        let g1 = c_i_gradient(1.0);
        assert!(g1.iter().any(|&v| v != 0.0));
        let half = c_i_gradient(0.5);
        for (h, one) in half.iter().zip(&g1) {
            assert!((h - 0.5 * one).abs() <= 1e-15 * one.abs().max(1.0));
        }
    }

    #[test]
    fn jif_loss_requires_every_component() {
        let mut g = Graph::new();
        let l = g.constant(Array::from_rows(&[[0.0, 0.0]]).unwrap());
        let partial = HeadLogits {
            image: None,
            meta: Some(l),
            fused: Some(l),
        };
        assert!(matches!(
            total_loss(&mut g, Structure::Jif, &partial, &[0], &[1.0, 1.0], 0.5),
            Err(Error::Contract(_))
        ));
        let jf = total_loss(&mut g, Structure::Jf, &partial, &[0], &[1.0, 1.0], 0.5).unwrap();
        assert!((g.value(jf.total).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn weighted_ce_hand_value() {
        let mut g = Graph::new();
        let l = g.constant(Array::from_rows(&[[0.0, 0.0]]).unwrap());
        let v = g.weighted_ce(l, &[0], &[2.0, 1.0]).unwrap();
        assert!((g.value(v).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decision_fusion_examples() {
        let t = PredictionTriple {
            p_i: Some(Array::from_rows(&[[1.0, 0.0]]).unwrap()),
            p_m: Some(Array::from_rows(&[[0.0, 1.0]]).unwrap()),
            p_im: Some(Array::from_rows(&[[0.5, 0.5]]).unwrap()),
        };
        assert_eq!(decision_fuse(&t).unwrap().data(), &[0.5, 0.5]);
        let p = Array::from_rows(&[[0.2, 0.3, 0.5]]).unwrap();
        let same = PredictionTriple {
            p_i: Some(p.clone()),
            p_m: Some(p.clone()),
            p_im: Some(p.clone()),
        };
        for (a, b) in decision_fuse(&same).unwrap().data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-16);
        }
        let missing = PredictionTriple { p_i: None, ..same };
        assert!(matches!(decision_fuse(&missing), Err(Error::Contract(_))));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights_from_counts(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights_from_counts(&[30, 10]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && w[1] == 2.0);
        assert!(matches!(class_weights_from_counts(&[3, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn decision_fusion_is_convex(a in simplex(4), b in simplex(4), c in simplex(4)) {
            let t = PredictionTriple {
                p_i: Some(Array::vector(a.clone())),
                p_m: Some(Array::vector(b.clone())),
                p_im: Some(Array::vector(c.clone())),
            };
            let out = decision_fuse(&t).unwrap();
            prop_assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..4 {
                let lo = a[i].min(b[i]).min(c[i]);
                let hi = a[i].max(b[i]).max(c[i]);
                prop_assert!(out.data()[i] >= lo - 1e-15 && out.data()[i] <= hi + 1e-15);
            }
        }

        #[test]
        fn weights_times_counts_is_total(counts in prop::collection::vec(1usize..500, 2..8)) {
            let w = class_weights_from_counts(&counts).unwrap();
            let total: usize = counts.iter().sum();
            let back: f64 = w.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
            prop_assert!((back - total as f64).abs() < 1e-9 * total as f64);
        }

        #[test]
        fn total_loss_is_non_negative(beta in 0.0f64..=1.0, seed in 0u64..50) {
            let (m, ps) = build(Structure::Jif, FusionKind::Cat, seed);
            let (x, meta) = batch(3, seed + 100);
            let mut g = Graph::new();
            let (xv, mv) = (g.constant(x), g.constant(meta));
            let logits = m.forward(&mut g, &ps, xv, mv, Mode::Train).unwrap();
            let loss = total_loss(&mut g, Structure::Jif, &logits, &[0, 1, 2], &[1.0; 6], beta).unwrap();
            prop_assert!(g.value(loss.total).data()[0] >= 0.0);
        }
    }
}
