//! Per-scale feature encoders: two affine layers with `tanh` between them.

use crate::data::Matrix;
use crate::error::{RaciError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// `x -> W2 tanh(W1 x + b1) + b2`, applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl Mlp {
    pub fn init(p: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Mlp {
        let w1 = p.add_uniform(&format!("{prefix}.w1"), &[hidden, d_in], d_in, rng);
        let b1 = p.add_uniform(&format!("{prefix}.b1"), &[hidden], d_in, rng);
        let w2 = p.add_uniform(&format!("{prefix}.w2"), &[d_out, hidden], hidden, rng);
        let b2 = p.add_uniform(&format!("{prefix}.b2"), &[d_out], hidden, rng);
        Mlp {
            w1,
            b1,
            w2,
            b2,
            d_in,
            hidden,
            d_out,
        }
    }

    /// Look up an existing `prefix.{w1,b1,w2,b2}` group.
    pub fn bind(p: &ParamStore, prefix: &str) -> Result<Mlp> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            p.id(&name)
                .ok_or_else(|| RaciError::Load {
                    file: "parameters".into(),
                    msg: format!("missing tensor {name}"),
                })
        };
        let (w1, b1, w2, b2) = (get("w1")?, get("b1")?, get("w2")?, get("b2")?);
        let s1 = &p.tensor(w1).shape;
        let s2 = &p.tensor(w2).shape;
        if s1.len() != 2 || s2.len() != 2 || s2[1] != s1[0] {
            return Err(RaciError::Shape(format!("{prefix}: inconsistent layer shapes")));
        }
        Ok(Mlp {
            w1,
            b1,
            w2,
            b2,
            d_in: s1[1],
            hidden: s1[0],
            d_out: s2[0],
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &ParamStore, x: Var, rows: usize) -> Var {
        let a = tape.row_affine(p, self.w1, Some(self.b1), x, rows);
        let z = tape.tanh(a);
        tape.row_affine(p, self.w2, Some(self.b2), z, rows)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// The daily, monthly and regime encoders sharing output width `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParams {
    pub daily: Mlp,
    pub monthly: Mlp,
    pub regime: Mlp,
    pub h: usize,
}

impl EncoderParams {
    pub fn init(p: &mut ParamStore, d_daily: usize, d_monthly: usize, d_regime: usize, h: usize, rng: &mut Rng) -> Self {
        EncoderParams {
            daily: Mlp::init(p, "enc.daily", d_daily, h, h, rng),
            monthly: Mlp::init(p, "enc.monthly", d_monthly, h, h, rng),
            regime: Mlp::init(p, "enc.regime", d_regime, h, h, rng),
            h,
        }
    }

    pub fn bind(p: &ParamStore) -> Result<Self> {
        let daily = Mlp::bind(p, "enc.daily")?;
        let monthly = Mlp::bind(p, "enc.monthly")?;
        let regime = Mlp::bind(p, "enc.regime")?;
        let h = daily.d_out;
        if monthly.d_out != h || regime.d_out != h {
            return Err(RaciError::Shape("encoder output widths differ".into()));
        }
        Ok(EncoderParams {
            daily,
            monthly,
            regime,
            h,
        })
    }
}

fn run(p: &ParamStore, mlp: &Mlp, x: &Matrix, block: &str) -> Result<Matrix> {
    if x.cols != mlp.d_in {
        return Err(RaciError::Shape(format!(
            "{block} encoder expects {} columns, got {}",
            mlp.d_in, x.cols
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(&x.data);
    let out = mlp.apply(&mut tape, p, xv, x.rows);
    Matrix::from_vec(x.rows, mlp.d_out, tape.value(out).to_vec())
}

pub fn embed_daily(p: &ParamStore, enc: &EncoderParams, x_daily: &Matrix) -> Result<Matrix> {
    run(p, &enc.daily, x_daily, "daily")
}

pub fn embed_monthly(p: &ParamStore, enc: &EncoderParams, x_monthly: &Matrix) -> Result<Matrix> {
    run(p, &enc.monthly, x_monthly, "monthly")
}

/// `phi_R` of the regime vector `[x_yearly; x_static]`.
pub fn embed_regime(p: &ParamStore, enc: &EncoderParams, x_regime: &[f64]) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(1, x_regime.len(), x_regime.to_vec())?;
    Ok(run(p, &enc.regime, &m, "regime")?.data)
}
