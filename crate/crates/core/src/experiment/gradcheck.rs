//! Finite-difference check of every differentiable block at toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, grad_check_params, Array, Graph, GradReport, Var};
use crate::encoders::{ImageEncoderConfig, MetadataEncoderConfig};
use crate::error::Result;
use crate::fusion::{fuse_concat, Fusion, FusionKind};
use crate::layers::{Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::structures::{total_loss, HeadLogits, Model, ModelConfig, Structure};

pub const BLOCKS: [&str; 11] = [
    "metadata_encoder",
    "image_encoder",
    "fuse_concat",
    "mmfa",
    "mmfa_literal_eq7",
    "head_c_i",
    "head_c_m",
    "head_c_im",
    "total_loss_beta_0",
    "total_loss_beta_0.5",
    "total_loss_beta_1",
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<String>,
    pub pass: bool,
}

impl BlockReport {
    fn new(block: &str, r: GradReport) -> Self {
        Self {
            block: block.to_string(),
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
            worst: r.worst,
            pass: r.pass,
        }
    }
}

const B: usize = 4;
const CLASSES: usize = 3;
const LABELS: [usize; B] = [0, 2, 1, 2];
const WEIGHTS: [f64; CLASSES] = [1.0, 0.7, 1.4];
const META_WIDTH: usize = 5;
/// Prefix matching no parameter name, for blocks with inputs only.
const NO_PARAMS: &str = "\0";

fn random<R: Rng>(shape: &[usize], rng: &mut R) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn toy_model(fusion: FusionKind, literal_eq7: bool) -> (Model, ParamStore) {
    let cfg = ModelConfig {
        structure: Structure::Jif,
        fusion,
        classes: CLASSES,
        image: ImageEncoderConfig {
            channels: 2,
            height: 4,
            width: 4,
            block_channels: vec![3],
            kernel: 3,
            d_img: 6,
        },
        meta: MetadataEncoderConfig {
            input_width: META_WIDTH,
            hidden: vec![4],
            d_meta: 3,
        },
        heads: 3,
        literal_eq7,
    };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::new(cfg, &mut ps, &mut rng).expect("toy model");
    (model, ps)
}

fn ids(ps: &ParamStore, prefix: &str, eval: bool) -> Vec<ParamId> {
    ps.iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with(prefix) && (eval || !p.before_norm))
        .map(|(id, _)| id)
        .collect()
}

/// Checks `f` in train mode over parameters not cancelled by batch norm, then
/// in eval mode over all of them.
fn check<F>(ps: &ParamStore, prefix: &str, inputs: &[Array], fault: bool, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var], Mode) -> Result<Var>,
{
    let run = |mode: Mode, params: &[ParamId]| {
        grad_check_params(
            ps,
            params,
            inputs,
            |g: &mut Graph, ps: &ParamStore, v: &[Var]| {
                if fault {
                    g.inject_fault();
                }
                f(g, ps, v, mode)
            },
            gradcheck::STEP,
            gradcheck::TOLERANCE,
        )
    };
    let train = run(Mode::Train, &ids(ps, prefix, false))?;
    let eval = run(Mode::Eval, &ids(ps, prefix, true))?;
    Ok(train.merge(eval))
}

/// Class-weighted cross-entropy through a fixed random readout.
fn readout(g: &mut Graph, x: Var, r: &Array) -> Result<Var> {
    let r = g.constant(r.clone());
    let logits = g.linear(x, r, None)?;
    g.weighted_ce(logits, &LABELS, &WEIGHTS)
}

fn head_loss(g: &mut Graph, ps: &ParamStore, head: &Linear, x: Var) -> Result<Var> {
    let logits = head.forward(g, ps, x)?;
    g.weighted_ce(logits, &LABELS, &WEIGHTS)
}

/// Runs every block of [`BLOCKS`] once, in order. With `fault` set, each
/// graph corrupts its linear weight gradients, which must make the suite fail.
pub fn gradcheck_suite(fault: bool) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (model, ps) = toy_model(FusionKind::Mmfa, false);
    let (literal, literal_ps) = toy_model(FusionKind::Mmfa, true);
    let images = random(&[B, 2, 4, 4], &mut rng);
    let meta = random(&[B, META_WIDTH], &mut rng);
    let f_img = random(&[B, 6], &mut rng);
    let f_meta = random(&[B, 3], &mut rng);
    let r_meta = random(&[3, CLASSES], &mut rng);
    let r_img = random(&[6, CLASSES], &mut rng);
    let r_fused = random(&[9, CLASSES], &mut rng);
    let meta_enc = model.meta_encoder.as_ref().expect("JIF has a metadata encoder");
    let heads = [
        model.c_i.as_ref().expect("C_I"),
        model.c_m.as_ref().expect("C_M"),
        model.c_im.as_ref().expect("C_IM"),
    ];
    let mmfa = |m: &Model| match m.fusion.as_ref() {
        Some(Fusion::Mmfa(x)) => x.clone(),
        _ => unreachable!("toy model uses MMFA"),
    };
    let (mmfa_pre, mmfa_lit) = (mmfa(&model), mmfa(&literal));

    let mut out = Vec::with_capacity(BLOCKS.len());
    let mut push = |name: &str, r: GradReport| {
        log::info!("{name}: {r}");
        out.push(BlockReport::new(name, r));
    };

    push(
        BLOCKS[0],
        check(&ps, "meta.", std::slice::from_ref(&meta), fault, |g, ps, v, mode| {
            let y = meta_enc.forward(g, ps, v[0], mode)?;
            readout(g, y, &r_meta)
        })?,
    );
    push(
        BLOCKS[1],
        check(&ps, "image.", std::slice::from_ref(&images), fault, |g, ps, v, mode| {
            let y = model.image_encoder.forward(g, ps, v[0], mode)?;
            readout(g, y, &r_img)
        })?,
    );
    let pair = [f_img.clone(), f_meta.clone()];
    push(
        BLOCKS[2],
        check(&ps, NO_PARAMS, &pair, fault, |g, _, v, _| {
            let y = fuse_concat(g, v[0], v[1])?;
            readout(g, y, &r_fused)
        })?,
    );
    push(
        BLOCKS[3],
        check(&ps, "mmfa.", &pair, fault, |g, ps, v, mode| {
            let y = mmfa_pre.forward(g, ps, v[0], v[1], mode)?;
            readout(g, y, &r_fused)
        })?,
    );
    push(
        BLOCKS[4],
        check(&literal_ps, "mmfa.", &pair, fault, |g, ps, v, mode| {
            let y = mmfa_lit.forward(g, ps, v[0], v[1], mode)?;
            readout(g, y, &r_fused)
        })?,
    );
    let fused = random(&[B, 9], &mut rng);
    let head_inputs = [f_img, f_meta, fused];
    for (k, (head, prefix)) in heads.iter().zip(["head.c_i", "head.c_m", "head.c_im"]).enumerate() {
        push(
            BLOCKS[5 + k],
            check(&ps, prefix, std::slice::from_ref(&head_inputs[k]), fault, |g, ps, v, _| {
                head_loss(g, ps, head, v[0])
            })?,
        );
    }
    let logits = [random(&[B, CLASSES], &mut rng), random(&[B, CLASSES], &mut rng), random(&[B, CLASSES], &mut rng)];
    for (k, beta) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        push(
            BLOCKS[8 + k],
            check(&ps, NO_PARAMS, &logits, fault, |g, _, v, _| {
                let heads = HeadLogits {
                    image: Some(v[0]),
                    meta: Some(v[1]),
                    fused: Some(v[2]),
                };
                Ok(total_loss(g, Structure::Jif, &heads, &LABELS, &WEIGHTS, beta)?.total)
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_lists_each_block_once() {
        let reports = gradcheck_suite(false).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.block.as_str()).collect();
        assert_eq!(names, BLOCKS);
        for r in &reports {
            assert!(r.pass, "{} {:e} at {:?}", r.block, r.max_rel_error, r.worst);
            assert!(r.coordinates > 0, "{}", r.block);
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let reports = gradcheck_suite(true).unwrap();
        assert!(reports.iter().any(|r| !r.pass));
        assert!(!reports.iter().find(|r| r.block == "head_c_im").unwrap().pass);
    }
}
