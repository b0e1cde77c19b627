use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear, Mode};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataEncoderConfig {
    /// Encoded schema width W.
    pub input_width: usize,
    /// Widths of the hidden blocks; the final block always outputs `d_meta`.
    pub hidden: Vec<usize>,
    pub d_meta: usize,
}

/// Stack of `linear → batch norm → ReLU` blocks mapping encoded metadata to
/// `f_M`.
#[derive(Clone, Debug)]
pub struct MetadataEncoder {
    pub config: MetadataEncoderConfig,
    pub blocks: Vec<(Linear, BatchNorm)>,
}

impl MetadataEncoder {
    pub fn new<R: Rng>(config: MetadataEncoderConfig, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.input_width == 0 || config.d_meta == 0 || config.hidden.contains(&0) {
            return Err(Error::Config(format!("metadata encoder widths must be positive: {config:?}")));
        }
        let mut blocks = Vec::new();
        let mut width = config.input_width;
        for (i, &out) in config.hidden.iter().chain([&config.d_meta]).enumerate() {
            let lin = Linear::new(ps, &format!("meta.block{i}.linear"), width, out, rng);
            ps.mark_before_norm(lin.bias);
            let bn = BatchNorm::new(ps, &format!("meta.block{i}.bn"), out);
            blocks.push((lin, bn));
            width = out;
        }
        Ok(Self { config, blocks })
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_meta
    }

    /// `B×W → B×D_M`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match *g.shape(x) {
            [_, w] if w == self.config.input_width => {}
            _ => {
                return Err(Error::dim(
                    "encode_metadata",
                    format!(
                        "input {:?} does not match schema width {}",
                        g.shape(x),
                        self.config.input_width
                    ),
                ))
            }
        }
        let mut h = x;
        for (lin, bn) in &self.blocks {
            h = lin.forward(g, ps, h)?;
            h = bn.forward(g, ps, h, mode)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(hidden: Vec<usize>, width: usize, d: usize) -> (MetadataEncoder, ParamStore) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = MetadataEncoder::new(
            MetadataEncoderConfig {
                input_width: width,
                hidden,
                d_meta: d,
            },
            &mut ps,
            &mut rng,
        )
        .unwrap();
        (enc, ps)
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let (enc, mut ps) = encoder(vec![5], 4, 3);
        ps.zero_trainable(|name| name.contains("linear"));
        let mut g = Graph::new();
        let x = g.constant(Array::filled(&[3, 4], 0.7));
        for mode in [Mode::Train, Mode::Eval] {
            let y = enc.forward(&mut g, &ps, x, mode).unwrap();
            assert_eq!(g.shape(y), &[3, 3]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layer_leaves_norm_and_relu() {
        let (enc, mut ps) = encoder(vec![], 2, 2);
        let (lin, _) = &enc.blocks[0];
        ps.get_mut(lin.weight).value = Array::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        ps.get_mut(lin.bias).value = Array::zeros(&[2]);
        let mut g = Graph::new();
        let x = g.constant(Array::from_rows(&[[1.0, 5.0], [3.0, 1.0]]).unwrap());
        let y = enc.forward(&mut g, &ps, x, Mode::Train).unwrap();
        // Column 0: mean 2, var 1 → [-1, 1]; column 1: mean 3, var 4 → [1, -1]; then ReLU.
        let expected = [0.0, 1.0, 1.0, 0.0];
        for (a, e) in g.value(y).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn default_shape_is_batch_by_d_meta() {
        let (enc, ps) = encoder(vec![64], 20, 64);
        assert_eq!(enc.blocks.len(), 2);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..8 * 20).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let x = g.constant(Array::new(vec![8, 20], data).unwrap());
        let y = enc.forward(&mut g, &ps, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[8, 64]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let (enc, ps) = encoder(vec![], 4, 2);
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[2, 5]));
        assert!(matches!(
            enc.forward(&mut g, &ps, x, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }
}
