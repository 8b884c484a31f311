//! Layer helpers shared by the network modules.

use crate::error::Result;
use crate::ops::ConvSpec;
use crate::params::Bound;
use crate::tape::{Tape, Var};

/// Convolution `name.w` followed by bias `name.b`.
pub fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.conv(x, w, spec)?;
    tape.add_bias(y, b)
}

/// Cubic 3-D convolution with stride/padding/dilation, plus bias.
pub fn conv3(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize, dilation: usize) -> Result<Var> {
    conv(tape, p, name, x, ConvSpec::cubic(stride, pad, dilation))
}

/// Planar convolution on a `C×1×H×W` tensor, plus bias.
pub fn conv2(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize, dilation: usize) -> Result<Var> {
    conv(tape, p, name, x, ConvSpec::planar(stride, pad, dilation))
}

/// Stride-2, pad-1 transposed 3³ convolution that exactly doubles each extent.
pub fn upsample3(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.conv_transpose(x, w, ConvSpec::cubic(2, 1, 1), [1; 3])?;
    tape.add_bias(y, b)
}

/// Dense layer on a vector: `W·x + b`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let n = tape.shape(x)[0];
    let col = tape.reshape(x, &[n, 1])?;
    let y = tape.matmul(w, col)?;
    let m = tape.shape(y)[0];
    let y = tape.reshape(y, &[m])?;
    tape.add(y, b)
}
