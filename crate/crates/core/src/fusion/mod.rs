//! Fusion modules mapping `(f_I, f_M)` to the joint feature `F_IM`: plain
//! concatenation and multi-modal fusion attention (MMFA).

mod mmfa;

use serde::{Deserialize, Serialize};

pub use mmfa::{assemble_kqv, attention_heads, AttentionConfig, AttentionOutput, Mmfa, Qkv, QkvBranch};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Cat,
    Mmfa,
}

impl FusionKind {
    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Cat => "CAT",
            FusionKind::Mmfa => "MMFA",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Concat,
    Mmfa(Mmfa),
}

impl Fusion {
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_img: Var, f_meta: Var, mode: Mode) -> Result<Var> {
        match self {
            Fusion::Concat => fuse_concat(g, f_img, f_meta),
            Fusion::Mmfa(m) => m.forward(g, ps, f_img, f_meta, mode),
        }
    }
}

pub(crate) fn batch_of(g: &Graph, op: &'static str, x: Var) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [b, w] => Ok((b, w)),
        _ => Err(Error::dim(op, format!("expected B×D features, got {:?}", g.shape(x)))),
    }
}

/// Row-wise `[f_I ; f_M]`.
pub fn fuse_concat(g: &mut Graph, f_img: Var, f_meta: Var) -> Result<Var> {
    let (bi, _) = batch_of(g, "fuse_concat", f_img)?;
    let (bm, _) = batch_of(g, "fuse_concat", f_meta)?;
    if bi != bm {
        return Err(Error::dim(
            "fuse_concat",
            format!("image batch {bi} vs metadata batch {bm}"),
        ));
    }
    g.concat(f_img, f_meta)
}
