use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumAxis {
    /// Sum across columns, one value per row (`n x 1`).
    Rows,
    /// Sum of every element (`1 x 1`).
    All,
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant(Matrix),
    MaskedMatMul {
        x: Var,
        w: Var,
        mask: Option<Matrix>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var, SumAxis),
    LogSumExp {
        inputs: Vec<Var>,
        blocks: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MaskedMatMul { .. } => "masked_matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(..) => "sum",
            Op::LogSumExp { .. } => "logsumexp",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// A recorded computation graph in topological order.
///
/// The right operand of `add`/`mul` may broadcast against the left one as a
/// `1 x n` row, an `n x 1` column or a `1 x 1` scalar. The last node pushed
/// is the output and must be `1 x 1` when [`forward`](Tape::forward) runs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_shapes: Vec<(usize, usize)>,
    values: Vec<Option<Matrix>>,
    // masked weights for matmul nodes, cached by forward
    aux: Vec<Option<Matrix>>,
    evaluated: bool,
}

fn shape_of(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, a.1) || b == (a.0, 1) || b == (1, 1)
}

/// Sum `g` (shaped like the left operand) down to the shape of a broadcast
/// right operand.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if shape_of(g) == shape {
        return g.clone();
    }
    match shape {
        (1, 1) => Array2::from_elem((1, 1), g.sum()),
        (1, _) => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        _ => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes.len()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> Var {
        self.nodes.push(Node { op, shape });
        self.evaluated = false;
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Declare a parameter slot. Its value is supplied to `forward` at the
    /// slot's position, in declaration order.
    pub fn param(&mut self, rows: usize, cols: usize) -> Var {
        let slot = self.param_shapes.len();
        self.param_shapes.push((rows, cols));
        self.push(Op::Param(slot), (rows, cols))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        let shape = shape_of(&value);
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// `x · (w ⊙ mask)`; gradients w.r.t. `w` are masked as well.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: Option<Matrix>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.1 != ws.0 {
            return Err(self.mismatch("masked_matmul", format!("{xs:?} · {ws:?}")));
        }
        if let Some(m) = &mask {
            if shape_of(m) != ws {
                return Err(self.mismatch(
                    "masked_matmul",
                    format!("mask {:?} vs weight {ws:?}", shape_of(m)),
                ));
            }
        }
        Ok(self.push(Op::MaskedMatMul { x, w, mask }, (xs.0, ws.1)))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.masked_matmul(x, w, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(self.mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(self.mismatch("mul", format!("{sa:?} * {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let c = self.scalar(k);
        self.mul(a, c)
    }

    /// `a - b`, composed as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Tanh(a), s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Sigmoid(a), s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Log(a), s)
    }

    pub fn sum(&mut self, a: Var, axis: SumAxis) -> Var {
        let s = self.shape(a);
        let out = match axis {
            SumAxis::Rows => (s.0, 1),
            SumAxis::All => (1, 1),
        };
        self.push(Op::Sum(a, axis), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let total = self.sum(a, SumAxis::All);
        self.scale(total, 1.0 / (r * c) as f64)
    }

    /// Elementwise `log Σ_k exp(inputs[k])` over equally shaped inputs.
    pub fn logsumexp(&mut self, inputs: &[Var]) -> Result<Var> {
        self.logsumexp_blocks(inputs, 1)
    }

    /// Like [`logsumexp`](Self::logsumexp), but each input is also cut into
    /// `blocks` equal row blocks that join the reduction: output row `j`
    /// reduces row `b * rows / blocks + j` of every input, for every block `b`.
    pub fn logsumexp_blocks(&mut self, inputs: &[Var], blocks: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| self.mismatch("logsumexp", "no inputs".into()))?;
        let s = self.shape(first);
        if let Some(bad) = inputs.iter().find(|v| self.shape(**v) != s) {
            return Err(self.mismatch("logsumexp", format!("{:?} vs {s:?}", self.shape(*bad))));
        }
        if blocks == 0 || !s.0.is_multiple_of(blocks) {
            return Err(self.mismatch(
                "logsumexp",
                format!("{} rows do not split into {blocks} blocks", s.0),
            ));
        }
        Ok(self.push(
            Op::LogSumExp {
                inputs: inputs.to_vec(),
                blocks,
            },
            (s.0 / blocks, s.1),
        ))
    }

    fn val(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Constant(m) => m,
            _ => self.values[v.0]
                .as_ref()
                .expect("node evaluated before its consumers"),
        }
    }

    /// Cached value of a node after `forward`.
    pub fn value(&self, v: Var) -> Option<&Matrix> {
        if !self.evaluated {
            return None;
        }
        Some(self.val(v))
    }

    /// Evaluate every node against `params` and return the scalar output.
    pub fn forward(&mut self, params: &[Matrix]) -> Result<f64> {
        if params.len() != self.param_shapes.len() {
            return Err(Error::Shape {
                node: 0,
                op: "param",
                detail: format!(
                    "expected {} parameter arrays, got {}",
                    self.param_shapes.len(),
                    params.len()
                ),
            });
        }
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::invalid("empty tape"));
        }
        self.values = vec![None; n];
        self.aux = vec![None; n];
        self.evaluated = false;
        for i in 0..n {
            let value = match &self.nodes[i].op {
                Op::Param(slot) => {
                    let p = &params[*slot];
                    if shape_of(p) != self.nodes[i].shape {
                        return Err(Error::Shape {
                            node: i,
                            op: "param",
                            detail: format!(
                                "slot {slot} declared {:?}, got {:?}",
                                self.nodes[i].shape,
                                shape_of(p)
                            ),
                        });
                    }
                    Some(p.clone())
                }
                Op::Constant(_) => None,
                Op::MaskedMatMul { x, w, mask } => {
                    let wv = self.val(*w);
                    let masked = match mask {
                        Some(m) => wv * m,
                        None => wv.clone(),
                    };
                    let out = self.val(*x).dot(&masked);
                    self.aux[i] = Some(masked);
                    Some(out)
                }
                Op::Add(a, b) => Some(self.val(*a) + self.val(*b)),
                Op::Mul(a, b) => Some(self.val(*a) * self.val(*b)),
                Op::Tanh(a) => Some(self.val(*a).mapv(tanh)),
                Op::Sigmoid(a) => Some(self.val(*a).mapv(sigmoid)),
                Op::Exp(a) => Some(self.val(*a).mapv(f64::exp)),
                Op::Log(a) => Some(self.val(*a).mapv(f64::ln)),
                Op::Sum(a, SumAxis::Rows) => {
                    Some(self.val(*a).sum_axis(Axis(1)).insert_axis(Axis(1)))
                }
                Op::Sum(a, SumAxis::All) => Some(Array2::from_elem((1, 1), self.val(*a).sum())),
                Op::LogSumExp { inputs, blocks } => {
                    let rows = self.nodes[i].shape.0;
                    let parts: Vec<_> = inputs
                        .iter()
                        .flat_map(|x| {
                            let v = self.val(*x);
                            (0..*blocks).map(move |b| v.slice(s![b * rows..(b + 1) * rows, ..]))
                        })
                        .collect();
                    let mut m = parts[0].to_owned();
                    for p in &parts[1..] {
                        Zip::from(&mut m).and(p).for_each(|m, &v| *m = m.max(v));
                    }
                    let mut acc = Array2::<f64>::zeros(m.raw_dim());
                    for p in &parts {
                        Zip::from(&mut acc).and(p).and(&m).for_each(|a, &v, &mx| {
                            if mx.is_finite() {
                                *a += (v - mx).exp()
                            }
                        });
                    }
                    Zip::from(&mut acc).and(&m).for_each(|a, &mx| {
                        *a = if mx.is_finite() { mx + a.ln() } else { mx };
                    });
                    Some(acc)
                }
            };
            self.values[i] = value;
        }
        self.evaluated = true;
        let out = self.val(Var(n - 1));
        if shape_of(out) != (1, 1) {
            return Err(Error::Shape {
                node: n - 1,
                op: self.nodes[n - 1].op.name(),
                detail: format!("output must be 1x1, got {:?}", shape_of(out)),
            });
        }
        Ok(out[[0, 0]])
    }

    /// Gradients of the output w.r.t. every parameter slot, in slot order.
    pub fn backward(&self) -> Result<Vec<Matrix>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[n - 1] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Matrix> = self
            .param_shapes
            .iter()
            .map(|&s| Array2::zeros(s))
            .collect();

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(slot) => param_grads[*slot] += &g,
                Op::Constant(_) => {}
                Op::MaskedMatMul { x, w, mask } => {
                    let masked = self.aux[i].as_ref().expect("cached by forward");
                    acc(&mut grads, *x, g.dot(&masked.t()));
                    let mut gw = self.val(*x).t().dot(&g);
                    if let Some(m) = mask {
                        gw *= m;
                    }
                    acc(&mut grads, *w, gw);
                }
                Op::Add(a, b) => {
                    let sb = self.nodes[b.0].shape;
                    acc(&mut grads, *b, reduce_to(&g, sb));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let sb = self.nodes[b.0].shape;
                    let gb = &g * self.val(*a);
                    acc(&mut grads, *b, reduce_to(&gb, sb));
                    acc(&mut grads, *a, g * self.val(*b));
                }
                Op::Tanh(a) => {
                    let y = self.val(Var(i));
                    acc(
                        &mut grads,
                        *a,
                        Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y)),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = self.val(Var(i));
                    acc(
                        &mut grads,
                        *a,
                        Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)),
                    );
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, g * self.val(Var(i)));
                }
                Op::Log(a) => {
                    acc(&mut grads, *a, g / self.val(*a));
                }
                Op::Sum(a, axis) => {
                    let s = self.nodes[a.0].shape;
                    let full = match axis {
                        SumAxis::Rows => g.broadcast(s).expect("n x 1 broadcasts").to_owned(),
                        SumAxis::All => Array2::from_elem(s, g[[0, 0]]),
                    };
                    acc(&mut grads, *a, full);
                }
                Op::LogSumExp { inputs, blocks } => {
                    let y = self.val(Var(i));
                    let rows = y.nrows();
                    for x in inputs {
                        let v = self.val(*x);
                        let mut gx = Array2::<f64>::zeros(v.raw_dim());
                        for b in 0..*blocks {
                            let range = s![b * rows..(b + 1) * rows, ..];
                            Zip::from(gx.slice_mut(range))
                                .and(&g)
                                .and(v.slice(range))
                                .and(y)
                                .for_each(|o, &g, &v, &y| *o = g * (v - y).exp());
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
            }
        }
        Ok(param_grads)
    }
}

/// `exp(x)` for `0 <= x <= 40`, branch-free so loops over it vectorize.
#[inline]
fn exp_bounded(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 0.693_147_180_369_123_8;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let n = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to r^13 on |r| <= ln2/2
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p01 = C[0] + C[1] * r;
    let p23 = C[2] + C[3] * r;
    let p45 = C[4] + C[5] * r;
    let p67 = C[6] + C[7] * r;
    let p89 = C[8] + C[9] * r;
    let p1011 = C[10] + C[11] * r;
    let p1213 = C[12] + C[13] * r;
    let lo = (p01 + p23 * r2) + (p45 + p67 * r2) * r4;
    let hi = (p89 + p1011 * r2) + p1213 * r4;
    let p = lo + hi * r8;
    p * f64::from_bits(((n as i64 + 1023) as u64) << 52)
}

/// Hyperbolic tangent accurate to a few ulp; faster than `f64::tanh`.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let small = {
        let a2 = a * a;
        a * (1.0
            + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0 + a2 * (62.0 / 2835.0)))))
    };
    let e = exp_bounded((2.0 * a).min(40.0));
    let large = 1.0 - 2.0 / (e + 1.0);
    let t = if a < 0.05 { small } else { large };
    if x.is_nan() {
        x
    } else {
        t.copysign(x)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_fn(build: impl Fn(&mut Tape, Var) -> Var, x: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let p = t.param(1, 1);
        let y = build(&mut t, p);
        let _ = t.sum(y, SumAxis::All);
        let v = t.forward(&[array![[x]]]).unwrap();
        let g = t.backward().unwrap();
        (v, g[0][[0, 0]])
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let x = match i % 3 {
                0 => rng.random_range(-0.05..0.05),
                1 => rng.random_range(-3.0..3.0),
                _ => rng.random_range(-40.0..40.0),
            };
            let rel = (tanh(x) - x.tanh()).abs() / x.tanh().abs().max(1e-300);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-14, "{worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e3), 1.0);
        assert_eq!(tanh(-1e3), -1.0);
        assert_eq!(tanh(f64::INFINITY), 1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    #[test]
    fn tanh_at_zero() {
        let (v, g) = scalar_fn(|t, x| t.tanh(x), 0.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, 1.0);
    }

    #[test]
    fn log_sigmoid_derivative_at_zero() {
        let (v, g) = scalar_fn(
            |t, x| {
                let s = t.sigmoid(x);
                t.log(s)
            },
            0.0,
        );
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        assert!((g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_equal_logits() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0]]);
        let b = t.constant(array![[0.0]]);
        let _ = t.logsumexp(&[a, b]).unwrap();
        let v = t.forward(&[]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn blocked_logsumexp_reduces_row_blocks() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0], [1.0], [2.0], [3.0]]);
        let b = t.constant(array![[4.0], [5.0], [6.0], [7.0]]);
        let l = t.logsumexp_blocks(&[a, b], 2).unwrap();
        let _ = t.sum(l, SumAxis::All);
        t.forward(&[]).unwrap();
        let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        let got = t.value(l).unwrap();
        assert_eq!(got.dim(), (2, 1));
        assert!((got[[0, 0]] - lse(&[0.0, 2.0, 4.0, 6.0])).abs() < 1e-12);
        assert!((got[[1, 0]] - lse(&[1.0, 3.0, 5.0, 7.0])).abs() < 1e-12);
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((3, 1)));
        assert!(t.logsumexp_blocks(&[a], 2).is_err());
    }

    #[test]
    fn zero_mask_annihilates() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let w = t.param(2, 3);
        let y = t.masked_matmul(x, w, Some(Array2::zeros((2, 3)))).unwrap();
        let _ = t.sum(y, SumAxis::All);
        let wv = array![[5.0, -1.0, 2.0], [0.3, 9.0, -7.0]];
        assert_eq!(t.forward(&[wv]).unwrap(), 0.0);
        assert_eq!(t.value(y).unwrap(), &Array2::<f64>::zeros((2, 3)));
        assert_eq!(t.backward().unwrap()[0], Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn fan_out_accumulates() {
        let (v, g) = scalar_fn(|t, x| t.add(x, x).unwrap(), 3.0);
        assert_eq!(v, 6.0);
        assert_eq!(g, 2.0);
    }

    #[test]
    fn backward_before_forward_is_error() {
        let mut t = Tape::new();
        let p = t.param(1, 1);
        let _ = t.exp(p);
        assert!(matches!(t.backward(), Err(Error::NotEvaluated)));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut t = Tape::new();
        let a = t.param(2, 3);
        let b = t.param(2, 3);
        match t.masked_matmul(a, b, None) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "masked_matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let s = t.sum(a, SumAxis::All);
        let _ = s;
        match t.forward(&[Array2::zeros((2, 3)), Array2::zeros((3, 2))]) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "param");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let a = t.param(2, 2);
        let _ = t.tanh(a);
        assert!(matches!(
            t.forward(&[Array2::zeros((2, 2))]),
            Err(Error::Shape { .. })
        ));
    }

    /// Central-difference check of every parameter coordinate.
    fn check_gradients(build: &dyn Fn(&mut Tape, &[Var]) -> Var, params: Vec<Matrix>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| t.param(p.nrows(), p.ncols()))
            .collect();
        let out = build(&mut t, &vars);
        let _ = t.sum(out, SumAxis::All);
        t.forward(&params).unwrap();
        let analytic = t.backward().unwrap();
        let h = 1e-6;
        for (k, p) in params.iter().enumerate() {
            for idx in 0..p.len() {
                let (r, c) = (idx / p.ncols(), idx % p.ncols());
                let mut plus = params.clone();
                plus[k][[r, c]] += h;
                let mut minus = params.clone();
                minus[k][[r, c]] -= h;
                let fp = t.forward(&plus).unwrap();
                let fm = t.forward(&minus).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[k][[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    rel <= 1e-4,
                    "param {k} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_matrix(&mut rng, 3, 4, -1.5, 1.5);
            let b = rand_matrix(&mut rng, 3, 4, -1.5, 1.5);
            let w = rand_matrix(&mut rng, 4, 2, -1.0, 1.0);
            let row = rand_matrix(&mut rng, 1, 4, -1.0, 1.0);
            let pos = rand_matrix(&mut rng, 3, 4, 0.5, 2.0);
            let mask = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) % 2) as f64);

            check_gradients(&|t, v| t.tanh(v[0]), vec![a.clone()]);
            check_gradients(&|t, v| t.sigmoid(v[0]), vec![a.clone()]);
            check_gradients(&|t, v| t.exp(v[0]), vec![a.clone()]);
            check_gradients(&|t, v| t.log(v[0]), vec![pos.clone()]);
            check_gradients(
                &|t, v| t.add(v[0], v[1]).unwrap(),
                vec![a.clone(), row.clone()],
            );
            check_gradients(
                &|t, v| t.mul(v[0], v[1]).unwrap(),
                vec![a.clone(), b.clone()],
            );
            check_gradients(
                &|t, v| t.mul(v[0], v[1]).unwrap(),
                vec![a.clone(), row.clone()],
            );
            check_gradients(
                &|t, v| {
                    let s = t.sum(v[0], SumAxis::Rows);
                    t.mul(s, s).unwrap()
                },
                vec![a.clone()],
            );
            check_gradients(
                &|t, v| {
                    let y = t.masked_matmul(v[0], v[1], Some(mask.clone())).unwrap();
                    t.tanh(y)
                },
                vec![a.clone(), w.clone()],
            );
            check_gradients(
                &|t, v| {
                    let sq = t.mul(v[0], v[1]).unwrap();
                    t.logsumexp(&[v[0], v[1], sq]).unwrap()
                },
                vec![a.clone(), b.clone()],
            );
            check_gradients(
                &|t, v| {
                    let sq = t.mul(v[1], v[1]).unwrap();
                    t.logsumexp_blocks(&[sq, v[1]], 3).unwrap()
                },
                vec![a.clone(), rand_matrix(&mut rng, 6, 2, -2.0, 2.0)],
            );
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = rand_matrix(&mut rng, 5, 3, -1.0, 1.0);
            let w = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let mut t = Tape::new();
            let xv = t.constant(x);
            let wv = t.param(3, 3);
            let y = t.matmul(xv, wv).unwrap();
            let h = t.tanh(y);
            let l = t.logsumexp(&[h, y]).unwrap();
            let _ = t.sum(l, SumAxis::All);
            let v = t.forward(&[w]).unwrap();
            (v.to_bits(), t.backward().unwrap())
        };
        assert_eq!(run(), run());
    }
}
