use alloc::format;

use crate::error::Result;
use crate::nn::{ConvSpec, Mode, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::real::Real;
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Registers layer parameters under dotted names.
pub(crate) struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
}

impl<T: Real> Builder<'_, T> {
    /// `k x k` convolution padded to keep `H / stride`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Result<Conv> {
        let fan_in = (cin / groups) * k * k;
        let w = self.store.add(format!("{name}.weight"), [cout, cin / groups, k, k], ParamKind::Weight { fan_in })?;
        let b = if bias { Some(self.store.add(format!("{name}.bias"), [1, cout, 1, 1], ParamKind::Bias)?) } else { None };
        Ok(Conv { w, b, spec: ConvSpec { stride, padding: k / 2, groups } })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.add(format!("{name}.weight"), [1, c, 1, 1], ParamKind::NormScale)?,
            beta: self.store.add(format!("{name}.bias"), [1, c, 1, 1], ParamKind::NormShift)?,
            mean: self.store.add(format!("{name}.running_mean"), [1, c, 1, 1], ParamKind::RunningMean)?,
            var: self.store.add(format!("{name}.running_var"), [1, c, 1, 1], ParamKind::RunningVar)?,
        })
    }

    /// Conv (bias only without norm), optional batch norm, ReLU.
    pub fn conv_block(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, norm: bool) -> Result<ConvBlock> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, stride, 1, !norm)?;
        let norm = if norm { Some(self.norm(&format!("{name}.bn"), cout)?) } else { None };
        Ok(ConvBlock { conv, norm })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    conv: Conv,
    norm: Option<Norm>,
}

/// Forward-pass state shared by all layers of one model call.
pub(crate) struct Ctx<'a, 'r, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: Option<&'r mut RngStream>,
}

impl<T: Real> Ctx<'_, '_, T> {
    pub fn conv(&mut self, l: &Conv, x: Var) -> Result<Var> {
        let w = self.tape.param(self.store, l.w);
        let b = l.b.map(|b| self.tape.param(self.store, b));
        self.tape.conv2d(x, w, b, l.spec)
    }

    pub fn norm(&mut self, l: &Norm, x: Var) -> Result<Var> {
        let g = self.tape.param(self.store, l.gamma);
        let b = self.tape.param(self.store, l.beta);
        self.tape.batch_norm(x, g, b, self.store, (l.mean, l.var), self.mode)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }

    pub fn block(&mut self, l: &ConvBlock, x: Var) -> Result<Var> {
        let mut y = self.conv(&l.conv, x)?;
        if let Some(n) = &l.norm {
            y = self.norm(n, y)?;
        }
        Ok(self.relu(y))
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, self.rng.as_deref_mut())
    }
}
