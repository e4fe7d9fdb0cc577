use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{sigmoid, Parameter};
use crate::error::{Error, Result};

/// Gated recurrent unit.
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// h̃  = tanh(Wh x + Uh (r ⊙ h) + bh)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub wz: Parameter,
    pub uz: Parameter,
    pub bz: Parameter,
    pub wr: Parameter,
    pub ur: Parameter,
    pub br: Parameter,
    pub wh: Parameter,
    pub uh: Parameter,
    pub bh: Parameter,
}

/// Forward record of a GRU run over a sequence, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GruSequence {
    pub inputs: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub candidate: Array2<f64>,
    pub reset_hidden: Array2<f64>,
    /// Hidden state after each step, one row per input.
    pub outputs: Array2<f64>,
}

impl GruSequence {
    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.nrows() == 0
    }

    /// Final hidden state (the initial state when the sequence is empty).
    pub fn last(&self) -> Array1<f64> {
        match self.len() {
            0 => self.h_prev.row(0).to_owned(),
            n => self.outputs.row(n - 1).to_owned(),
        }
    }
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        // fan-in of each gate is input + hidden.
        let fan = input_dim + hidden_dim;
        let mut p = |suffix: &str, rows: usize, cols: usize| {
            Parameter::uniform(format!("{prefix}.{suffix}"), rows, cols, fan, rng)
        };
        Self {
            wz: p("wz", hidden_dim, input_dim),
            uz: p("uz", hidden_dim, hidden_dim),
            bz: p("bz", 1, hidden_dim),
            wr: p("wr", hidden_dim, input_dim),
            ur: p("ur", hidden_dim, hidden_dim),
            br: p("br", 1, hidden_dim),
            wh: p("wh", hidden_dim, input_dim),
            uh: p("uh", hidden_dim, hidden_dim),
            bh: p("bh", 1, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wz.value.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.value.nrows()
    }

    pub fn params(&self) -> [&Parameter; 9] {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh, &self.bh,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ]
    }

    fn check_dims(&self, input: usize, hidden: usize) -> Result<()> {
        if input != self.input_dim() || hidden != self.hidden_dim() {
            return Err(Error::shape(
                "gru_step",
                format!("x {}, h {}", self.input_dim(), self.hidden_dim()),
                format!("x {input}, h {hidden}"),
            ));
        }
        Ok(())
    }

    /// One recurrence step.
    pub fn step(&self, x: ArrayView1<'_, f64>, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dims(x.len(), h.len())?;
        let z = (self.wz.value.dot(&x) + self.uz.value.dot(&h) + self.bz.as_vector()).mapv(sigmoid);
        let r = (self.wr.value.dot(&x) + self.ur.value.dot(&h) + self.br.as_vector()).mapv(sigmoid);
        let rh = &r * &h;
        let cand = (self.wh.value.dot(&x) + self.uh.value.dot(&rh) + self.bh.as_vector()).mapv(f64::tanh);
        Ok(Zip::from(&z)
            .and(&h)
            .and(&cand)
            .map_collect(|&z, &h, &c| (1.0 - z) * h + z * c))
    }

    /// Runs the cell over every row of `inputs`, starting from `h0`.
    pub fn forward_sequence(&self, inputs: ArrayView2<'_, f64>, h0: ArrayView1<'_, f64>) -> Result<GruSequence> {
        self.check_dims(inputs.ncols(), h0.len())?;
        let len = inputs.nrows();
        let hidden = self.hidden_dim();
        let xz = inputs.dot(&self.wz.value.t()) + &self.bz.value;
        let xr = inputs.dot(&self.wr.value.t()) + &self.br.value;
        let xh = inputs.dot(&self.wh.value.t()) + &self.bh.value;

        let mut h_prev = Array2::zeros((len.max(1), hidden));
        let mut z = Array2::zeros((len, hidden));
        let mut r = Array2::zeros((len, hidden));
        let mut cand = Array2::zeros((len, hidden));
        let mut rh = Array2::zeros((len, hidden));
        let mut outputs = Array2::zeros((len, hidden));
        let mut h = h0.to_owned();
        if len == 0 {
            h_prev.row_mut(0).assign(&h);
        }
        for t in 0..len {
            h_prev.row_mut(t).assign(&h);
            let zt = (&xz.row(t) + &self.uz.value.dot(&h)).mapv(sigmoid);
            let rt = (&xr.row(t) + &self.ur.value.dot(&h)).mapv(sigmoid);
            let rht = &rt * &h;
            let ct = (&xh.row(t) + &self.uh.value.dot(&rht)).mapv(f64::tanh);
            Zip::from(&mut h)
                .and(&zt)
                .and(&ct)
                .for_each(|h, &z, &c| *h = (1.0 - z) * *h + z * c);
            z.row_mut(t).assign(&zt);
            r.row_mut(t).assign(&rt);
            cand.row_mut(t).assign(&ct);
            rh.row_mut(t).assign(&rht);
            outputs.row_mut(t).assign(&h);
        }
        Ok(GruSequence {
            inputs: inputs.to_owned(),
            h_prev,
            z,
            r,
            candidate: cand,
            reset_hidden: rh,
            outputs,
        })
    }

    /// Backpropagation through time.
    ///
    /// `d_outputs` holds the loss gradient w.r.t. each step's output and
    /// `d_last` an extra gradient on the final state. Parameter gradients are
    /// accumulated; returns `(dL/d inputs, dL/d h0)`.
    pub fn backward_sequence(
        &mut self,
        seq: &GruSequence,
        d_outputs: ArrayView2<'_, f64>,
        d_last: ArrayView1<'_, f64>,
    ) -> (Array2<f64>, Array1<f64>) {
        let len = seq.len();
        let hidden = self.hidden_dim();
        let mut dh = d_last.to_owned();
        if len == 0 {
            return (Array2::zeros((0, self.input_dim())), dh);
        }
        let mut daz = Array2::zeros((len, hidden));
        let mut dar = Array2::zeros((len, hidden));
        let mut dan = Array2::zeros((len, hidden));
        for t in (0..len).rev() {
            dh += &d_outputs.row(t);
            let z = seq.z.row(t);
            let r = seq.r.row(t);
            let c = seq.candidate.row(t);
            let hp = seq.h_prev.row(t);

            let mut dan_t = Array1::zeros(hidden);
            Zip::from(&mut dan_t)
                .and(&dh)
                .and(&z)
                .and(&c)
                .for_each(|out, &dh, &z, &c| *out = dh * z * (1.0 - c * c));
            let d_rh = self.uh.value.t().dot(&dan_t);
            let mut daz_t = dh.clone();
            Zip::from(&mut daz_t)
                .and(&c)
                .and(&hp)
                .and(&z)
                .for_each(|out, &c, &hp, &z| *out *= (c - hp) * z * (1.0 - z));
            let mut dar_t = d_rh.clone();
            Zip::from(&mut dar_t)
                .and(&hp)
                .and(&r)
                .for_each(|out, &hp, &r| *out *= hp * r * (1.0 - r));

            let mut dh_prev = self.uz.value.t().dot(&daz_t) + self.ur.value.t().dot(&dar_t);
            Zip::from(&mut dh_prev)
                .and(&dh)
                .and(&z)
                .and(&d_rh)
                .and(&r)
                .for_each(|out, &dh, &z, &drh, &r| *out += dh * (1.0 - z) + drh * r);

            daz.row_mut(t).assign(&daz_t);
            dar.row_mut(t).assign(&dar_t);
            dan.row_mut(t).assign(&dan_t);
            dh = dh_prev;
        }

        let h_prev = seq.h_prev.slice(s![..len, ..]);
        self.wz.grad += &daz.t().dot(&seq.inputs);
        self.uz.grad += &daz.t().dot(&h_prev);
        self.bz.grad += &daz.sum_axis(Axis(0));
        self.wr.grad += &dar.t().dot(&seq.inputs);
        self.ur.grad += &dar.t().dot(&h_prev);
        self.br.grad += &dar.sum_axis(Axis(0));
        self.wh.grad += &dan.t().dot(&seq.inputs);
        self.uh.grad += &dan.t().dot(&seq.reset_hidden);
        self.bh.grad += &dan.sum_axis(Axis(0));

        let dx = daz.dot(&self.wz.value) + dar.dot(&self.wr.value) + dan.dot(&self.wh.value);
        (dx, dh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> GruCell {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = GruCell::new("g", input, hidden, &mut rng);
        for p in cell.params_mut() {
            p.value.fill(0.0);
        }
        cell
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_fixed_point() {
        let cell = zero_cell(3, 4);
        let h = cell.step(Array1::ones(3).view(), Array1::zeros(4).view()).unwrap();
        assert_eq!(h, Array1::<f64>::zeros(4));
    }

    #[test]
    fn saturated_update_gate_yields_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cell = GruCell::new("g", 3, 4, &mut rng);
        cell.bz.value.fill(100.0);
        let x = random_vec(&mut rng, 3);
        let h = random_vec(&mut rng, 4);
        let out = cell.step(x.view(), h.view()).unwrap();
        let r = (cell.wr.value.dot(&x) + cell.ur.value.dot(&h) + cell.br.as_vector()).mapv(sigmoid);
        let cand = (cell.wh.value.dot(&x) + cell.uh.value.dot(&(&r * &h)) + cell.bh.as_vector()).mapv(f64::tanh);
        for (a, b) in out.iter().zip(cand.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_straight_line_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = GruCell::new("g", 3, 5, &mut rng);
        let x = random_vec(&mut rng, 3);
        let h = random_vec(&mut rng, 5);
        let out = cell.step(x.view(), h.view()).unwrap();
        // Independent scalar loops over the raw weight entries.
        let gate = |w: &Parameter, u: &Parameter, b: &Parameter, hin: &[f64], i: usize| {
            let mut acc = b.value[[0, i]];
            for j in 0..3 {
                acc += w.value[[i, j]] * x[j];
            }
            for j in 0..5 {
                acc += u.value[[i, j]] * hin[j];
            }
            acc
        };
        let hv: Vec<f64> = h.to_vec();
        let r: Vec<f64> = (0..5)
            .map(|i| 1.0 / (1.0 + (-gate(&cell.wr, &cell.ur, &cell.br, &hv, i)).exp()))
            .collect();
        let rh: Vec<f64> = (0..5).map(|i| r[i] * hv[i]).collect();
        for i in 0..5 {
            let z = 1.0 / (1.0 + (-gate(&cell.wz, &cell.uz, &cell.bz, &hv, i)).exp());
            let c = gate(&cell.wh, &cell.uh, &cell.bh, &rh, i).tanh();
            let expected = (1.0 - z) * hv[i] + z * c;
            assert!((out[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cell = zero_cell(3, 4);
        assert!(cell.step(Array1::zeros(2).view(), Array1::zeros(4).view()).is_err());
        assert!(cell.step(Array1::zeros(3).view(), Array1::zeros(5).view()).is_err());
    }

    #[test]
    fn sequence_agrees_with_steps_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = GruCell::new("g", 2, 6, &mut rng);
        let xs = Array2::from_shape_simple_fn((7, 2), || rng.random_range(-5.0..5.0));
        let seq = cell.forward_sequence(xs.view(), Array1::zeros(6).view()).unwrap();
        let mut h = Array1::zeros(6);
        for t in 0..7 {
            h = cell.step(xs.row(t), h.view()).unwrap();
            for (a, b) in h.iter().zip(seq.outputs.row(t).iter()) {
                assert!((a - b).abs() < 1e-13);
            }
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
        for (a, b) in seq.last().iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn backward_sequence_matches_finite_difference() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cell = GruCell::new("g", 3, 4, &mut rng);
            let xs = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
            let h0 = random_vec(&mut rng, 4);
            let weights = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
            let last_w = random_vec(&mut rng, 4);
            let loss = |cell: &GruCell, xs: &Array2<f64>, h0: &Array1<f64>| {
                let seq = cell.forward_sequence(xs.view(), h0.view()).unwrap();
                (&seq.outputs * &weights).sum() + seq.last().dot(&last_w)
            };
            let seq = cell.forward_sequence(xs.view(), h0.view()).unwrap();
            let (dx, dh0) = cell.backward_sequence(&seq, weights.view(), last_w.view());

            let eps = 1e-5;
            let check = |analytic: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * eps);
                let denom = analytic.abs().max(fd.abs()).max(1e-5);
                assert!((analytic - fd).abs() / denom < 1e-6, "{analytic} vs {fd}");
            };
            for idx in 0..cell.params().len() {
                let shape = cell.params()[idx].shape();
                for i in 0..shape.0 {
                    for j in 0..shape.1 {
                        let mut plus = cell.clone();
                        plus.params_mut()[idx].value[[i, j]] += eps;
                        let mut minus = cell.clone();
                        minus.params_mut()[idx].value[[i, j]] -= eps;
                        check(
                            cell.params()[idx].grad[[i, j]],
                            loss(&plus, &xs, &h0),
                            loss(&minus, &xs, &h0),
                        );
                    }
                }
            }
            for i in 0..5 {
                for j in 0..3 {
                    let mut plus = xs.clone();
                    plus[[i, j]] += eps;
                    let mut minus = xs.clone();
                    minus[[i, j]] -= eps;
                    check(dx[[i, j]], loss(&cell, &plus, &h0), loss(&cell, &minus, &h0));
                }
            }
            for j in 0..4 {
                let mut plus = h0.clone();
                plus[j] += eps;
                let mut minus = h0.clone();
                minus[j] -= eps;
                check(dh0[j], loss(&cell, &xs, &plus), loss(&cell, &xs, &minus));
            }
        }
    }
}
