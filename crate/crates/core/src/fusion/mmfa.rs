//! Multi-modal fusion attention.
//!
//! Each modality is projected by one `linear → BN` layer whose output is cut
//! into query, key and value thirds. The thirds of both modalities are joined
//! metadata-first into `F_Q`, `F_K`, `F_V` of width `D_T = d_img + d_meta`,
//! which are split into `h` heads of width `s = D_T / h`. Within a head the
//! attention is per coordinate: `w = softmax((F_K ⊙ F_Q) / √s)` over the `s`
//! coordinates and `head = w ⊙ F_V`. The concatenated heads pass through
//! `nn(x) = BN(x·W + b)` and are added to the skip path `[f_I ; f_M]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_of, fuse_concat};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear, Mode};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_img: usize,
    pub d_meta: usize,
    /// Divide the softmax output by √s instead of scaling its input.
    #[serde(default)]
    pub literal_eq7: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, d_img: usize, d_meta: usize) -> Result<Self> {
        let cfg = Self {
            heads,
            d_img,
            d_meta,
            literal_eq7: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.d_total();
        if self.heads == 0 || total == 0 || total % self.heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("attention width {total} is not divisible into {} heads", self.heads),
            ));
        }
        Ok(())
    }

    pub fn d_total(&self) -> usize {
        self.d_img + self.d_meta
    }

    pub fn head_width(&self) -> usize {
        self.d_total() / self.heads
    }
}

/// Query, key and value of one modality or of the joined features.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// The `qkv` projection of one modality: `D → 3·d`, batch norm, thirds.
#[derive(Clone, Debug)]
pub struct QkvBranch {
    pub linear: Linear,
    pub norm: BatchNorm,
    pub width: usize,
}

impl QkvBranch {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d_in: usize, width: usize, rng: &mut R) -> Self {
        let linear = Linear::new(ps, &format!("{name}.linear"), d_in, 3 * width, rng);
        ps.mark_before_norm(linear.bias);
        let norm = BatchNorm::new(ps, &format!("{name}.bn"), 3 * width);
        Self { linear, norm, width }
    }

    pub fn project(&self, g: &mut Graph, ps: &ParamStore, f: Var, mode: Mode) -> Result<Qkv> {
        let h = self.linear.forward(g, ps, f)?;
        let h = self.norm.forward(g, ps, h, mode)?;
        let (q, k, v) = g.split_thirds(h)?;
        Ok(Qkv { q, k, v })
    }
}

/// `F_X = [meta_x ; img_x]` for each of query, key and value.
pub fn assemble_kqv(g: &mut Graph, img: Qkv, meta: Qkv) -> Result<Qkv> {
    let (bi, _) = batch_of(g, "assemble_kqv", img.q)?;
    let (bm, _) = batch_of(g, "assemble_kqv", meta.q)?;
    if bi != bm {
        return Err(Error::dim("assemble_kqv", format!("image batch {bi} vs metadata batch {bm}")));
    }
    Ok(Qkv {
        q: g.concat(meta.q, img.q)?,
        k: g.concat(meta.k, img.k)?,
        v: g.concat(meta.v, img.v)?,
    })
}

pub struct AttentionOutput {
    /// `B×D_T` concatenation of the heads.
    pub output: Var,
    /// `(B·h)×s` softmax weights, one row per sample and head.
    pub weights: Var,
}

/// Per-coordinate multi-head attention over the joined features.
pub fn attention_heads(g: &mut Graph, joined: Qkv, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    cfg.validate()?;
    let (batch, width) = batch_of(g, "attention_heads", joined.q)?;
    for x in [joined.k, joined.v] {
        if g.shape(x) != [batch, width] {
            return Err(Error::dim(
                "attention_heads",
                format!("query {:?} vs {:?}", g.shape(joined.q), g.shape(x)),
            ));
        }
    }
    if width != cfg.d_total() {
        return Err(Error::dim(
            "attention_heads",
            format!("features of width {width}, configured width {}", cfg.d_total()),
        ));
    }
    let (h, s) = (cfg.heads, cfg.head_width());
    let per_head = vec![batch * h, s];
    let q = g.reshape(joined.q, per_head.clone())?;
    let k = g.reshape(joined.k, per_head.clone())?;
    let v = g.reshape(joined.v, per_head)?;
    let scores = g.mul(k, q)?;
    let root = (s as f64).sqrt();
    let (weights, gate) = if cfg.literal_eq7 {
        let w = g.softmax(scores)?;
        (w, g.scale(w, 1.0 / root))
    } else {
        let scaled = g.scale(scores, 1.0 / root);
        let w = g.softmax(scaled)?;
        (w, w)
    };
    let heads = g.mul(gate, v)?;
    let output = g.reshape(heads, vec![batch, width])?;
    Ok(AttentionOutput { output, weights })
}

/// Parameters and forward pass of the MMFA module.
#[derive(Clone, Debug)]
pub struct Mmfa {
    pub config: AttentionConfig,
    pub d_img_in: usize,
    pub d_meta_in: usize,
    pub qkv_img: QkvBranch,
    pub qkv_meta: QkvBranch,
    pub out_linear: Linear,
    pub out_norm: BatchNorm,
}

impl Mmfa {
    /// `d_img_in`/`d_meta_in` are the encoder widths `D_I`/`D_M`.
    pub fn new<R: Rng>(
        config: AttentionConfig,
        d_img_in: usize,
        d_meta_in: usize,
        ps: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let qkv_img = QkvBranch::new(ps, "mmfa.qkv_img", d_img_in, config.d_img, rng);
        let qkv_meta = QkvBranch::new(ps, "mmfa.qkv_meta", d_meta_in, config.d_meta, rng);
        let fused = d_img_in + d_meta_in;
        let out_linear = Linear::new(ps, "mmfa.out.linear", config.d_total(), fused, rng);
        ps.mark_before_norm(out_linear.bias);
        let out_norm = BatchNorm::new(ps, "mmfa.out.bn", fused);
        Ok(Self {
            config,
            d_img_in,
            d_meta_in,
            qkv_img,
            qkv_meta,
            out_linear,
            out_norm,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.d_img_in + self.d_meta_in
    }

    /// Full forward pass, also returning the attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        f_img: Var,
        f_meta: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let (_, wi) = batch_of(g, "mmfa_fuse", f_img)?;
        let (_, wm) = batch_of(g, "mmfa_fuse", f_meta)?;
        if wi != self.d_img_in || wm != self.d_meta_in {
            return Err(Error::dim(
                "mmfa_fuse",
                format!(
                    "features of widths ({wi}, {wm}), module built for ({}, {})",
                    self.d_img_in, self.d_meta_in
                ),
            ));
        }
        let skip = fuse_concat(g, f_img, f_meta)?;
        let img = self.qkv_img.project(g, ps, f_img, mode)?;
        let meta = self.qkv_meta.project(g, ps, f_meta, mode)?;
        let joined = assemble_kqv(g, img, meta)?;
        let att = attention_heads(g, joined, &self.config)?;
        let h = self.out_linear.forward(g, ps, att.output)?;
        let h = self.out_norm.forward(g, ps, h, mode)?;
        Ok((g.add(h, skip)?, att.weights))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_img: Var, f_meta: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_with_weights(g, ps, f_img, f_meta, mode)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, Array};
    use crate::params::ParamId;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn module(d_i: usize, d_m: usize, heads: usize, seed: u64) -> (Mmfa, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionConfig::new(heads, d_i, d_m).unwrap();
        let m = Mmfa::new(cfg, d_i, d_m, &mut ps, &mut rng).unwrap();
        (m, ps)
    }

    fn qkv_consts(g: &mut Graph, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> Qkv {
        let w = q.len();
        let mut c = |d: Vec<f64>| g.constant(Array::new(vec![1, w], d).unwrap());
        Qkv {
            q: c(q),
            k: c(k),
            v: c(v),
        }
    }

    #[test]
    fn zero_scores_give_uniform_weights() {
        let cfg = AttentionConfig::new(2, 2, 2).unwrap();
        let mut g = Graph::new();
        let joined = qkv_consts(&mut g, vec![0.0; 4], vec![0.0; 4], vec![4.0, 6.0, -2.0, 8.0]);
        let att = attention_heads(&mut g, joined, &cfg).unwrap();
        assert!(g.value(att.weights).data().iter().all(|&w| w == 0.5));
        assert_eq!(g.value(att.output).data(), &[2.0, 3.0, -1.0, 4.0]);
    }

    #[test]
    fn hand_evaluated_single_head() {
        // K⊙Q = [ln2·√2, 0], scaled by 1/√2 → softmax([ln 2, 0]) = [2/3, 1/3].
        let cfg = AttentionConfig::new(1, 1, 1).unwrap();
        let mut g = Graph::new();
        let a = 2f64.ln() * 2f64.sqrt();
        let joined = qkv_consts(&mut g, vec![a, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]);
        let att = attention_heads(&mut g, joined, &cfg).unwrap();
        let w = g.value(att.weights).data();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_score_saturates() {
        let cfg = AttentionConfig::new(1, 2, 2).unwrap();
        let mut g = Graph::new();
        let joined = qkv_consts(
            &mut g,
            vec![100.0, 0.1, 0.2, 0.3],
            vec![100.0, 0.1, 0.2, 0.3],
            vec![5.0, 7.0, 9.0, 11.0],
        );
        let att = attention_heads(&mut g, joined, &cfg).unwrap();
        let w = g.value(att.weights).data();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1..].iter().all(|&x| x < 1e-12));
        assert!((g.value(att.output).data()[0] - 5.0).abs() < 1e-10);
    }

    #[test]
    fn literal_placement_divides_after_softmax() {
        let mut cfg = AttentionConfig::new(1, 2, 2).unwrap();
        cfg.literal_eq7 = true;
        let mut g = Graph::new();
        let joined = qkv_consts(&mut g, vec![0.0; 4], vec![0.0; 4], vec![1.0; 4]);
        let att = attention_heads(&mut g, joined, &cfg).unwrap();
        // uniform weights 1/4, divided by √4
        assert!(g.value(att.output).data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn kqv_are_joined_metadata_first() {
        let mut g = Graph::new();
        let img = qkv_consts(&mut g, vec![10.0], vec![5.0], vec![20.0]);
        let meta = qkv_consts(&mut g, vec![1.0], vec![2.0], vec![3.0]);
        let joined = assemble_kqv(&mut g, img, meta).unwrap();
        assert_eq!(g.value(joined.k).data(), &[2.0, 5.0]);
        assert_eq!(g.value(joined.q).data(), &[1.0, 10.0]);
        assert_eq!(g.value(joined.v).data(), &[3.0, 20.0]);
    }

    #[test]
    fn default_widths() {
        let (m, _) = module(128, 64, 8, 1);
        assert_eq!(m.config.d_total(), 192);
        assert_eq!(m.config.head_width(), 24);
        assert_eq!(m.output_dim(), 192);
        assert_eq!(m.qkv_img.linear.n_out, 384);
    }

    #[test]
    fn zero_qkv_gives_zero_thirds() {
        let (m, mut ps) = module(4, 2, 2, 2);
        ps.zero_trainable(|n| n.starts_with("mmfa.qkv_img"));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let f = g.constant(random(&[3, 4], &mut rng));
        let t = m.qkv_img.project(&mut g, &ps, f, Mode::Train).unwrap();
        for x in [t.q, t.k, t.v] {
            assert!(g.value(x).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zeroed_module_is_the_skip_connection() {
        let (m, mut ps) = module(6, 3, 3, 4);
        ps.zero_trainable(|_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fi = random(&[4, 6], &mut rng);
        let fm = random(&[4, 3], &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let (a, b) = (g.constant(fi.clone()), g.constant(fm.clone()));
            let fused = m.forward(&mut g, &ps, a, b, mode).unwrap();
            let cat = fuse_concat(&mut g, a, b).unwrap();
            assert_eq!(g.value(fused), g.value(cat));
        }
    }

    #[test]
    fn gradients_of_full_module_match_finite_differences() {
        for literal in [false, true] {
            let (mut m, ps) = module(6, 3, 3, 6);
            m.config.literal_eq7 = literal;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let inputs = [random(&[4, 6], &mut rng), random(&[4, 3], &mut rng)];
            let readout = random(&[9, 3], &mut rng);
            let labels = [0, 2, 1, 2];
            let weights = [1.0, 0.7, 1.4];
            let forward = |mode: Mode| {
                let m = &m;
                let readout = readout.clone();
                move |g: &mut Graph, ps: &ParamStore, v: &[Var]| {
                    let fused = m.forward(g, ps, v[0], v[1], mode)?;
                    let r = g.constant(readout.clone());
                    let logits = g.linear(fused, r, None)?;
                    g.weighted_ce(logits, &labels, &weights)
                }
            };
            let trainable: Vec<ParamId> = ps
                .iter()
                .filter(|(_, p)| p.trainable && !p.before_norm)
                .map(|(id, _)| id)
                .collect();
            let train = grad_check_params(&ps, &trainable, &inputs, forward(Mode::Train), 1e-5, 1e-4).unwrap();
            assert!(train.pass, "train literal={literal}: {train}");
            let all: Vec<ParamId> = ps.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
            let eval = grad_check_params(&ps, &all, &inputs, forward(Mode::Eval), 1e-5, 1e-4).unwrap();
            assert!(eval.pass, "eval literal={literal}: {eval}");
        }
    }

    #[test]
    fn eval_mode_is_batch_equivariant() {
        let (m, ps) = module(4, 4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fi = random(&[5, 4], &mut rng);
        let fm = random(&[5, 4], &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let permute = |a: &Array| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| a.row(i).to_vec()).collect();
            Array::from_rows(&rows).unwrap()
        };
        let run = |a: Array, b: Array| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(a), g.constant(b));
            let y = m.forward(&mut g, &ps, a, b, Mode::Eval).unwrap();
            g.value(y).clone()
        };
        let base = run(fi.clone(), fm.clone());
        let permuted = run(permute(&fi), permute(&fm));
        assert_eq!(permuted, permute(&base));
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(AttentionConfig::new(5, 6, 3), Err(Error::Dimension { .. })));
        assert!(matches!(AttentionConfig::new(0, 6, 3), Err(Error::Dimension { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_width_is_sum_of_inputs(d_i in 1usize..12, d_m in 1usize..12, pick in 0usize..8, batch in 2usize..5) {
            let total = d_i + d_m;
            let divisors: Vec<usize> = (1..=total).filter(|h| total % h == 0).collect();
            let heads = divisors[pick % divisors.len()];
            let (m, ps) = module(d_i, d_m, heads, pick as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(batch as u64);
            let mut g = Graph::new();
            let a = g.constant(random(&[batch, d_i], &mut rng));
            let b = g.constant(random(&[batch, d_m], &mut rng));
            let (y, w) = m.forward_with_weights(&mut g, &ps, a, b, Mode::Train).unwrap();
            prop_assert_eq!(g.shape(y), &[batch, d_i + d_m]);
            for row in g.value(w).rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
