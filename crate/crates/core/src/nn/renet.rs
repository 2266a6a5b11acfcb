//! LSTM sequence scans and the ReNet module built from them.
//!
//! [`lstm_scan`] runs one LSTM along the width axis of every row of a
//! feature map (all rows of all images batched together). [`renet`] scans
//! rows in both directions, concatenates, then scans the columns of that
//! result in both directions and concatenates again, so every output pixel
//! depends on every input pixel.
//!
//! Gate layout along the `4·hidden` axis is `[input, forget, cell, output]`.

use rand::Rng;

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::init;
use crate::nn::shape::{concat_channels, transpose_hw};
use crate::tensor::{gemm, Mat, Scalar, Shape, Tensor};

/// Owned parameters of one LSTM cell.
#[derive(Debug, Clone)]
pub struct RecurrentCell<T> {
    /// `(1, 1, input, 4·hidden)`
    pub w_ih: Tensor<T>,
    /// `(1, 1, hidden, 4·hidden)`
    pub w_hh: Tensor<T>,
    /// `(1, 1, 1, 4·hidden)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> RecurrentCell<T> {
    pub fn new(w_ih: Tensor<T>, w_hh: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let hidden = w_hh.shape().w;
        let ok = w_ih.shape().c == 4 * hidden
            && w_hh.shape() == Shape::new(1, 1, hidden, 4 * hidden)
            && bias.shape() == Shape::vector(4 * hidden)
            && w_ih.shape().n == 1
            && w_ih.shape().h == 1;
        if !ok || hidden == 0 {
            return Err(Error::shape(
                "lstm cell",
                format!(
                    "w_ih {}, w_hh {}, bias {}",
                    w_ih.shape(),
                    w_hh.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(RecurrentCell { w_ih, w_hh, bias })
    }

    /// Input weights uniform in `±1/√input`, orthogonal recurrent weights,
    /// zero biases except the forget gate at 1.
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let w_ih = init::uniform(
            rng,
            Shape::new(1, 1, input, 4 * hidden),
            1.0 / (input.max(1) as f64).sqrt(),
        );
        let w_hh = init::orthogonal_rows(rng, hidden, 4 * hidden);
        RecurrentCell {
            w_ih,
            w_hh,
            bias: forget_bias(hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        RecurrentCell {
            w_ih: Tensor::zeros(Shape::new(1, 1, input, 4 * hidden)),
            w_hh: Tensor::zeros(Shape::new(1, 1, hidden, 4 * hidden)),
            bias: Tensor::zeros(Shape::vector(4 * hidden)),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape().w
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape().w
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CellVars {
        CellVars {
            w_ih: g.param(self.w_ih.clone()),
            w_hh: g.param(self.w_hh.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

/// Bias vector with the forget-gate block set to one.
pub fn forget_bias<T: Scalar>(hidden: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::vector(4 * hidden), |_, _, _, c| {
        if (hidden..2 * hidden).contains(&c) {
            T::one()
        } else {
            T::zero()
        }
    })
    .expect("finite")
}

/// Graph handles of one LSTM cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    /// Increasing width index.
    Forward,
    /// Decreasing width index.
    Reverse,
}

/// Runs one LSTM along the width axis of every row; output `(n, H, W,
/// hidden)` holds the hidden state after consuming each position.
pub fn lstm_scan<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cell: CellVars,
    dir: Direction,
) -> Result<Var> {
    let xs = g.shape(x);
    let (wih_s, whh_s) = (g.shape(cell.w_ih), g.shape(cell.w_hh));
    let hidden = whh_s.w;
    let g4 = 4 * hidden;
    if hidden == 0
        || wih_s != Shape::new(1, 1, xs.c, g4)
        || whh_s != Shape::new(1, 1, hidden, g4)
        || g.shape(cell.bias) != Shape::vector(g4)
    {
        return Err(Error::shape(
            "lstm_scan",
            format!(
                "input {xs}, w_ih {wih_s}, w_hh {whh_s}, bias {}",
                g.shape(cell.bias)
            ),
        ));
    }
    let rows = xs.n * xs.h;
    let steps = xs.w;
    let os = xs.with_c(hidden);

    let mut xw = vec![T::zero(); rows * steps * g4];
    gemm(
        Mat::new(g.value(x).data(), rows * steps, xs.c),
        Mat::new(g.value(cell.w_ih).data(), xs.c, g4),
        &mut xw,
        false,
    );
    let bias = g.value(cell.bias).data().to_vec();
    let whh = g.value(cell.w_hh).data().to_vec();

    // Per step: gate activations (rows × 4h), cell state and its tanh (rows × h).
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(steps);
    let mut cells: Vec<Vec<T>> = Vec::with_capacity(steps);
    let mut hiddens: Vec<Vec<T>> = Vec::with_capacity(steps);
    let mut out = vec![T::zero(); os.len()];
    let zeros = vec![T::zero(); rows * hidden];
    for s in 0..steps {
        let t = match dir {
            Direction::Forward => s,
            Direction::Reverse => steps - 1 - s,
        };
        let mut gates = vec![T::zero(); rows * g4];
        for r in 0..rows {
            let src = &xw[(r * steps + t) * g4..][..g4];
            let dst = &mut gates[r * g4..(r + 1) * g4];
            for k in 0..g4 {
                dst[k] = src[k] + bias[k];
            }
        }
        let h_prev = if s == 0 { &zeros } else { &hiddens[s - 1] };
        gemm(
            Mat::new(h_prev, rows, hidden),
            Mat::new(&whh, hidden, g4),
            &mut gates,
            true,
        );
        let c_prev = if s == 0 { &zeros } else { &cells[s - 1] };
        let mut c_new = vec![T::zero(); rows * hidden];
        let mut h_new = vec![T::zero(); rows * hidden];
        for r in 0..rows {
            let gr = &mut gates[r * g4..(r + 1) * g4];
            for k in 0..hidden {
                let i = sigmoid(gr[k]);
                let f = sigmoid(gr[hidden + k]);
                let cc = gr[2 * hidden + k].tanh();
                let o = sigmoid(gr[3 * hidden + k]);
                gr[k] = i;
                gr[hidden + k] = f;
                gr[2 * hidden + k] = cc;
                gr[3 * hidden + k] = o;
                let c = f * c_prev[r * hidden + k] + i * cc;
                c_new[r * hidden + k] = c;
                h_new[r * hidden + k] = o * c.tanh();
            }
            out[(r * steps + t) * hidden..][..hidden]
                .copy_from_slice(&h_new[r * hidden..(r + 1) * hidden]);
        }
        acts.push(gates);
        cells.push(c_new);
        hiddens.push(h_new);
    }

    let rule = move |inp: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     needs: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let (xv, wih, whh) = (inp[0], inp[1], inp[2]);
        let mut dgates_all = vec![T::zero(); rows * steps * g4];
        let mut dwhh = vec![T::zero(); hidden * g4];
        let mut dh_next = vec![T::zero(); rows * hidden];
        let mut dc_next = vec![T::zero(); rows * hidden];
        let zeros = vec![T::zero(); rows * hidden];
        for s in (0..steps).rev() {
            let t = match dir {
                Direction::Forward => s,
                Direction::Reverse => steps - 1 - s,
            };
            let a = &acts[s];
            let c_prev = if s == 0 { &zeros } else { &cells[s - 1] };
            let mut dgates = vec![T::zero(); rows * g4];
            for r in 0..rows {
                let ar = &a[r * g4..(r + 1) * g4];
                let dyr = &dy.data()[(r * steps + t) * hidden..][..hidden];
                let dg = &mut dgates[r * g4..(r + 1) * g4];
                for k in 0..hidden {
                    let (i, f, cc, o) = (
                        ar[k],
                        ar[hidden + k],
                        ar[2 * hidden + k],
                        ar[3 * hidden + k],
                    );
                    let idx = r * hidden + k;
                    let tc = cells[s][idx].tanh();
                    let dh = dyr[k] + dh_next[idx];
                    let d_o = dh * tc;
                    let dc = dh * o * (T::one() - tc * tc) + dc_next[idx];
                    dg[k] = dc * cc * i * (T::one() - i);
                    dg[hidden + k] = dc * c_prev[idx] * f * (T::one() - f);
                    dg[2 * hidden + k] = dc * i * (T::one() - cc * cc);
                    dg[3 * hidden + k] = d_o * o * (T::one() - o);
                    dc_next[idx] = dc * f;
                }
                dgates_all[(r * steps + t) * g4..][..g4].copy_from_slice(dg);
            }
            if s > 0 {
                gemm(
                    Mat::new(&hiddens[s - 1], rows, hidden).t(),
                    Mat::new(&dgates, rows, g4),
                    &mut dwhh,
                    true,
                );
            }
            gemm(
                Mat::new(&dgates, rows, g4),
                Mat::new(whh.data(), hidden, g4).t(),
                &mut dh_next,
                false,
            );
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xv.len()];
            gemm(
                Mat::new(&dgates_all, rows * steps, g4),
                Mat::new(wih.data(), xs.c, g4).t(),
                &mut dx,
                false,
            );
            Tensor::from_raw(xs, dx)
        });
        let dwih = needs[1].then(|| {
            let mut d = vec![T::zero(); wih.len()];
            gemm(
                Mat::new(xv.data(), rows * steps, xs.c).t(),
                Mat::new(&dgates_all, rows * steps, g4),
                &mut d,
                false,
            );
            Tensor::from_raw(wih.shape(), d)
        });
        let db = needs[3].then(|| {
            Tensor::from_raw(
                Shape::vector(g4),
                crate::nn::conv::column_sums(&dgates_all, g4),
            )
        });
        vec![
            dx,
            dwih,
            needs[2].then(|| Tensor::from_raw(whh.shape(), dwhh)),
            db,
        ]
    };
    Ok(g.record(
        "lstm_scan",
        &[x, cell.w_ih, cell.w_hh, cell.bias],
        Tensor::from_raw(os, out),
        rule,
    ))
}

/// The four cells of a ReNet: row left→right, row right→left, column
/// bottom→top, column top→bottom.
#[derive(Debug, Clone)]
pub struct RenetParams<T> {
    pub cells: [RecurrentCell<T>; 4],
}

impl<T: Scalar> RenetParams<T> {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        RenetParams {
            cells: [
                RecurrentCell::init(rng, input, hidden),
                RecurrentCell::init(rng, input, hidden),
                RecurrentCell::init(rng, 2 * hidden, hidden),
                RecurrentCell::init(rng, 2 * hidden, hidden),
            ],
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> [CellVars; 4] {
        [
            self.cells[0].bind(g),
            self.cells[1].bind(g),
            self.cells[2].bind(g),
            self.cells[3].bind(g),
        ]
    }
}

/// Horizontal then vertical bidirectional scans; output has `2·hidden`
/// channels. The row-pass result feeds the column pass unmodified.
pub fn renet<T: Scalar>(g: &mut Graph<T>, x: Var, cells: &[CellVars; 4]) -> Result<Var> {
    let hidden = g.shape(cells[0].w_hh).w;
    if hidden == 0 {
        return Err(Error::InvalidArgument(
            "renet hidden size must be > 0".into(),
        ));
    }
    let lr = lstm_scan(g, x, cells[0], Direction::Forward)?;
    let rl = lstm_scan(g, x, cells[1], Direction::Reverse)?;
    let rows = concat_channels(g, &[lr, rl])?;
    // Columns become rows; width index now runs top→bottom.
    let t = transpose_hw(g, rows);
    let bt = lstm_scan(g, t, cells[2], Direction::Reverse)?;
    let tb = lstm_scan(g, t, cells[3], Direction::Forward)?;
    let cols = concat_channels(g, &[bt, tb])?;
    Ok(transpose_hw(g, cols))
}
