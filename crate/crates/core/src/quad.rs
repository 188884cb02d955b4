//! Adaptive Gauss–Kronrod (7/15) quadrature with global error control.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Estimated absolute error.
    pub error: f64,
    pub converged: bool,
}

#[derive(Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    depth: u32,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kron += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kron * half, ((kron - gauss) * half).abs())
}

/// Integrates `f` over `[a, b]` until the summed error estimate drops below
/// `abs_tol`, bisecting the worst interval each step. No interval is split
/// more than `max_depth` times or below a width of about 1e3 ulp.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, max_depth: u32) -> Quadrature {
    if a == b {
        return Quadrature {
            value: 0.0,
            error: 0.0,
            converged: true,
        };
    }
    let (value, error) = kronrod(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Piece {
        a,
        b,
        value,
        error,
        depth: 0,
    });
    let mut total_error = error;
    let mut frozen_value = 0.0;
    let mut frozen_error = 0.0;
    let mut steps = 0usize;
    while total_error + frozen_error > abs_tol && steps < 20_000 {
        let Some(worst) = heap.pop() else { break };
        total_error -= worst.error;
        let scale = worst.a.abs().max(worst.b.abs()).max(f64::MIN_POSITIVE);
        if worst.depth >= max_depth || worst.b - worst.a <= 1e3 * f64::EPSILON * scale {
            frozen_value += worst.value;
            frozen_error += worst.error;
            continue;
        }
        let mid = 0.5 * (worst.a + worst.b);
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (v, e) = kronrod(&f, lo, hi);
            total_error += e;
            heap.push(Piece {
                a: lo,
                b: hi,
                value: v,
                error: e,
                depth: worst.depth + 1,
            });
        }
        steps += 1;
        if steps.is_multiple_of(64) {
            total_error = heap.iter().map(|p| p.error).sum();
        }
    }
    let value = heap.iter().map(|p| p.value).sum::<f64>() + frozen_value;
    let error = heap.iter().map(|p| p.error).sum::<f64>() + frozen_error;
    Quadrature {
        value,
        error,
        converged: error <= abs_tol,
    }
}
