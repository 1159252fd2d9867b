use rand::Rng;

use super::{xavier, Scheme};
use crate::numkit::Tensor;

/// Declares a parameter block whose fields are all of type `T`, with the
/// checkpoint key of each field, plus `map`/`visit`/`visit_mut`.
macro_rules! param_block {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $key:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
                $(f(format!("{prefix}{}", $key), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", $key), &mut self.$field);)+
            }
        }
    };
}

param_block!(
    /// One expert: `act(x·W1ᵀ + b1)·W2ᵀ + b2`, routed by `route · x`.
    ExpertParams { w1 => "W1", b1 => "b1", w2 => "W2", b2 => "b2", route => "route" }
);

param_block!(
    /// Polarity weights (each `1 × H`) and the output projection `Wo`.
    PolarParams { wpp => "wpp", wnn => "wnn", wpn => "wpn", wnp => "wnp", wo => "Wo" }
);

param_block!(GcnParams { w => "W" });
param_block!(GatParams { w => "W", a => "a" });
param_block!(ScaParams { wq => "Wq", wk => "Wk", wv => "Wv" });

/// Projections, gate and experts of one DCA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DcaLayerParams<T> {
    pub wx: T,
    pub wy: T,
    pub wz: T,
    /// `M × 2M`, applied as `concat(P1, P2)·Wgᵀ`.
    pub wg: T,
    pub bg: T,
    pub experts: Vec<ExpertParams<T>>,
}

impl<T> DcaLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DcaLayerParams<U> {
        DcaLayerParams {
            wx: f(&self.wx),
            wy: f(&self.wy),
            wz: f(&self.wz),
            wg: f(&self.wg),
            bg: f(&self.bg),
            experts: self.experts.iter().map(|e| e.map(f)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{prefix}Wx"), &self.wx);
        f(format!("{prefix}Wy"), &self.wy);
        f(format!("{prefix}Wz"), &self.wz);
        f(format!("{prefix}Wg"), &self.wg);
        f(format!("{prefix}bg"), &self.bg);
        for (e, ex) in self.experts.iter().enumerate() {
            ex.visit(&format!("{prefix}expert{e}/"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}Wx"), &mut self.wx);
        f(format!("{prefix}Wy"), &mut self.wy);
        f(format!("{prefix}Wz"), &mut self.wz);
        f(format!("{prefix}Wg"), &mut self.wg);
        f(format!("{prefix}bg"), &mut self.bg);
        for (e, ex) in self.experts.iter_mut().enumerate() {
            ex.visit_mut(&format!("{prefix}expert{e}/"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolaLayerParams<T> {
    pub dca: DcaLayerParams<T>,
    pub polar: PolarParams<T>,
}

impl<T> PolaLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PolaLayerParams<U> {
        PolaLayerParams { dca: self.dca.map(f), polar: self.polar.map(f) }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        self.dca.visit(prefix, f);
        self.polar.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.dca.visit_mut(prefix, f);
        self.polar.visit_mut(prefix, f);
    }
}

/// Parameters of one layer of any scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Gcn(GcnParams<T>),
    Gat(GatParams<T>),
    Sca(ScaParams<T>),
    Dca(DcaLayerParams<T>),
    Pola(PolaLayerParams<T>),
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        match self {
            LayerParams::Gcn(p) => LayerParams::Gcn(p.map(f)),
            LayerParams::Gat(p) => LayerParams::Gat(p.map(f)),
            LayerParams::Sca(p) => LayerParams::Sca(p.map(f)),
            LayerParams::Dca(p) => LayerParams::Dca(p.map(f)),
            LayerParams::Pola(p) => LayerParams::Pola(p.map(f)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        match self {
            LayerParams::Gcn(p) => p.visit(prefix, f),
            LayerParams::Gat(p) => p.visit(prefix, f),
            LayerParams::Sca(p) => p.visit(prefix, f),
            LayerParams::Dca(p) => p.visit(prefix, f),
            LayerParams::Pola(p) => p.visit(prefix, f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        match self {
            LayerParams::Gcn(p) => p.visit_mut(prefix, f),
            LayerParams::Gat(p) => p.visit_mut(prefix, f),
            LayerParams::Sca(p) => p.visit_mut(prefix, f),
            LayerParams::Dca(p) => p.visit_mut(prefix, f),
            LayerParams::Pola(p) => p.visit_mut(prefix, f),
        }
    }
}

fn zeros_row(m: usize) -> Tensor {
    Tensor::zeros(&[1, m])
}

impl ExpertParams<Tensor> {
    pub fn init<R: Rng>(m: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(m, m, rng),
            b1: zeros_row(m),
            w2: xavier(m, m, rng),
            b2: zeros_row(m),
            route: xavier(1, m, rng),
        }
    }
}

impl DcaLayerParams<Tensor> {
    pub fn init<R: Rng>(d_in: usize, m: usize, n_experts: usize, rng: &mut R) -> Self {
        Self {
            wx: xavier(d_in, m, rng),
            wy: xavier(d_in, m, rng),
            wz: xavier(d_in, m, rng),
            wg: xavier(m, 2 * m, rng),
            bg: zeros_row(m),
            experts: (0..n_experts).map(|_| ExpertParams::init(m, rng)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.wx.cols()
    }
}

impl PolarParams<Tensor> {
    /// Weights start at (1, 1, −1, −1), i.e. at plain scaled dot-product
    /// attention.
    pub fn init<R: Rng>(m: usize, heads: usize, rng: &mut R) -> Self {
        Self::reduction(heads, xavier(m, m, rng))
    }

    /// Polarity weights (1, 1, −1, −1) with the given output projection.
    pub fn reduction(heads: usize, wo: Tensor) -> Self {
        Self {
            wpp: Tensor::filled(&[1, heads], 1.0),
            wnn: Tensor::filled(&[1, heads], 1.0),
            wpn: Tensor::filled(&[1, heads], -1.0),
            wnp: Tensor::filled(&[1, heads], -1.0),
            wo,
        }
    }
}

impl LayerParams<Tensor> {
    pub fn init<R: Rng>(scheme: Scheme, d_in: usize, m: usize, heads: usize, n_experts: usize, rng: &mut R) -> Self {
        match scheme {
            Scheme::Gcn => LayerParams::Gcn(GcnParams { w: xavier(d_in, m, rng) }),
            Scheme::Gat => LayerParams::Gat(GatParams { w: xavier(d_in, m, rng), a: xavier(1, 2 * m, rng) }),
            Scheme::Sca => LayerParams::Sca(ScaParams {
                wq: xavier(d_in, m, rng),
                wk: xavier(d_in, m, rng),
                wv: xavier(d_in, m, rng),
            }),
            Scheme::Dca => LayerParams::Dca(DcaLayerParams::init(d_in, m, n_experts, rng)),
            Scheme::PolaDca => {
                let dca = DcaLayerParams::init(d_in, m, n_experts, rng);
                LayerParams::Pola(PolaLayerParams { dca, polar: PolarParams::init(m, heads, rng) })
            }
        }
    }
}
