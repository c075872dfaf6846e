//! CGRU and diagonal CGRU step functions.
//!
//! A step reads the previous state `s: [.., n, m]` and computes
//!
//! ```text
//! u = σ*(U' ∗ s + B')          update gate
//! r = σ*(U'' ∗ s + B'')        reset gate
//! c = tanh*(U ∗ (r ⊙ s) + B)   candidate, then candidate dropout
//! out = u ⊙ s̃ + (1 - u) ⊙ c
//! ```
//!
//! where `s̃ = s` for the plain CGRU and a per-map shifted copy of `s` for
//! the diagonal variant. `σ*` / `tanh*` are the hard or the smooth
//! functions depending on [`Nonlinearity`].

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::tensor::{Parameter, Real, Shift, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Cgru,
    Dcgru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Hard,
    Soft,
}

/// The six learned arrays of one recurrent unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T> {
    /// Candidate kernel `U: [w, m, m]`.
    pub candidate_kernel: Parameter<T>,
    /// Update-gate kernel `U'`.
    pub update_kernel: Parameter<T>,
    /// Reset-gate kernel `U''`.
    pub reset_kernel: Parameter<T>,
    pub candidate_bias: Parameter<T>,
    pub update_bias: Parameter<T>,
    pub reset_bias: Parameter<T>,
}

impl<T: Real> CellParams<T> {
    pub fn maps(&self) -> usize {
        self.candidate_bias.value.len()
    }

    pub fn check(&self) -> Result<()> {
        let m = self.maps();
        let w = self.candidate_kernel.value.shape()[0];
        for k in [&self.candidate_kernel, &self.update_kernel, &self.reset_kernel] {
            if k.value.shape() != [w, m, m] {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected [{w}, {m}, {m}]",
                    k.name,
                    k.value.shape()
                )));
            }
        }
        for b in [&self.candidate_bias, &self.update_bias, &self.reset_bias] {
            if b.value.shape() != [m] {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected [{m}]",
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Put all six arrays on the tape.
    pub fn register(&self, g: &mut Graph<T>) -> CellVars {
        CellVars {
            candidate_kernel: g.leaf(self.candidate_kernel.value.clone()),
            update_kernel: g.leaf(self.update_kernel.value.clone()),
            reset_kernel: g.leaf(self.reset_kernel.value.clone()),
            candidate_bias: g.leaf(self.candidate_bias.value.clone()),
            update_bias: g.leaf(self.update_bias.value.clone()),
            reset_bias: g.leaf(self.reset_bias.value.clone()),
        }
    }
}

/// Tape handles for [`CellParams`].
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub candidate_kernel: Var,
    pub update_kernel: Var,
    pub reset_kernel: Var,
    pub candidate_bias: Var,
    pub update_bias: Var,
    pub reset_bias: Var,
}

/// Map counts per gate direction. Groups are contiguous: stay maps first,
/// then right-shifted, then left-shifted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiagonalSplit {
    pub stay: usize,
    pub right: usize,
    pub left: usize,
}

impl DiagonalSplit {
    /// `m / 3` maps per group, remainder to the stay group.
    pub fn even(m: usize) -> Self {
        let third = m / 3;
        DiagonalSplit {
            stay: m - 2 * third,
            right: third,
            left: third,
        }
    }

    pub fn all_stay(m: usize) -> Self {
        DiagonalSplit {
            stay: m,
            right: 0,
            left: 0,
        }
    }

    pub fn maps(&self) -> usize {
        self.stay + self.right + self.left
    }

    pub fn directions(&self) -> Arc<[Shift]> {
        std::iter::repeat_n(Shift::Stay, self.stay)
            .chain(std::iter::repeat_n(Shift::Right, self.right))
            .chain(std::iter::repeat_n(Shift::Left, self.left))
            .collect()
    }

    pub fn direction_of(&self, map: usize) -> Shift {
        if map < self.stay {
            Shift::Stay
        } else if map < self.stay + self.right {
            Shift::Right
        } else {
            Shift::Left
        }
    }
}

/// Running saturation cost of one forward pass.
#[derive(Debug, Default)]
pub struct SaturationAccumulator {
    terms: Vec<Var>,
    sum: f64,
    count: usize,
}

impl SaturationAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    /// Number of units that contributed a (possibly zero) cost.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn terms(&self) -> &[Var] {
        &self.terms
    }

    /// Charge the saturation cost of every entry of `pre_activation`.
    pub fn charge<T: Real>(&mut self, g: &mut Graph<T>, pre_activation: Var, s_limit: T) {
        let s = g.saturation(pre_activation, s_limit);
        self.sum += g.scalar(s).as_f64();
        self.count += g.value(pre_activation).len();
        self.terms.push(s);
    }

    /// Sum all charged terms into one scalar node (`None` if nothing was charged).
    pub fn total<T: Real>(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        let mut iter = self.terms.iter().copied();
        let Some(mut acc) = iter.next() else {
            return Ok(None);
        };
        for t in iter {
            acc = g.add(acc, t)?;
        }
        Ok(Some(acc))
    }
}

/// Candidate-vector dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub p: f64,
    pub training: bool,
}

impl DropoutSpec {
    pub fn off() -> Self {
        DropoutSpec {
            p: 0.0,
            training: false,
        }
    }

    pub fn active(&self) -> bool {
        self.training && self.p > 0.0
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *v = keep;
        }
    }
    mask
}

/// Apply candidate dropout with a fresh mask; identity outside training.
pub fn apply_recurrent_dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    c: Var,
    spec: &DropoutSpec,
    rng: &mut R,
) -> Result<Var> {
    if !spec.active() {
        return Ok(c);
    }
    if !(0.0..1.0).contains(&spec.p) {
        return Err(Error::Config(format!("dropout probability {} not in [0, 1)", spec.p)));
    }
    let mask = dropout_mask(g.value(c).shape(), spec.p, rng);
    g.mul_const(c, mask)
}

/// Per-step behaviour shared by both cell kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub nonlinearity: Nonlinearity,
    /// `Some(s_limit)` charges saturation cost (hard mode only).
    pub saturation_limit: Option<f64>,
    pub dropout: DropoutSpec,
}

impl StepOptions {
    fn gate(&self, g: &mut Graph<impl Real>, x: Var) -> Var {
        match self.nonlinearity {
            Nonlinearity::Hard => g.unary(Unary::HardSigmoid, x),
            Nonlinearity::Soft => g.unary(Unary::Sigmoid, x),
        }
    }

    fn squash(&self, g: &mut Graph<impl Real>, x: Var) -> Var {
        match self.nonlinearity {
            Nonlinearity::Hard => g.unary(Unary::HardTanh, x),
            Nonlinearity::Soft => g.unary(Unary::Tanh, x),
        }
    }

    fn charge<T: Real>(&self, g: &mut Graph<T>, sat: &mut SaturationAccumulator, pre: Var) {
        if let (Nonlinearity::Hard, Some(lim)) = (self.nonlinearity, self.saturation_limit) {
            sat.charge(g, pre, T::from_f64(lim));
        }
    }
}

fn gated_step<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    s_prev: Var,
    carried: Var,
    cell: &CellVars,
    opts: &StepOptions,
    rng: &mut R,
    sat: &mut SaturationAccumulator,
) -> Result<Var> {
    let u_pre = g.conv1d_same(s_prev, cell.update_kernel, cell.update_bias)?;
    opts.charge(g, sat, u_pre);
    let u = opts.gate(g, u_pre);

    let r_pre = g.conv1d_same(s_prev, cell.reset_kernel, cell.reset_bias)?;
    opts.charge(g, sat, r_pre);
    let r = opts.gate(g, r_pre);

    let gated = g.mul(r, s_prev)?;
    let c_pre = g.conv1d_same(gated, cell.candidate_kernel, cell.candidate_bias)?;
    opts.charge(g, sat, c_pre);
    let c = opts.squash(g, c_pre);
    let c = apply_recurrent_dropout(g, c, &opts.dropout, rng)?;

    let keep = g.mul(u, carried)?;
    let one_minus_u = g.unary(Unary::OneMinus, u);
    let write = g.mul(one_minus_u, c)?;
    g.add(keep, write)
}

pub fn cgru_step<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    s_prev: Var,
    cell: &CellVars,
    opts: &StepOptions,
    rng: &mut R,
    sat: &mut SaturationAccumulator,
) -> Result<Var> {
    gated_step(g, s_prev, s_prev, cell, opts, rng, sat)
}

/// Diagonal CGRU: the update gate carries a shifted copy of the state.
/// Gates and candidate still read the unshifted state.
pub fn dcgru_step<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    s_prev: Var,
    cell: &CellVars,
    directions: &Arc<[Shift]>,
    opts: &StepOptions,
    rng: &mut R,
    sat: &mut SaturationAccumulator,
) -> Result<Var> {
    let shifted = g.depthwise_shift(s_prev, directions.clone())?;
    gated_step(g, s_prev, shifted, cell, opts, rng, sat)
}
