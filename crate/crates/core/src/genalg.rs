//! Generalized-coordinates algebra.
//!
//! A generalized vector stacks a quantity with its first `order` temporal
//! derivatives, `[v, v', v'', ...]`. Derivative-major ordering is used
//! throughout, so lifted operators take the form `I_{p+1} ⊗ M` and
//! `shift ⊗ I_n`.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedVector {
    base_dim: usize,
    order: usize,
    data: DVector<f64>,
}

impl GeneralizedVector {
    pub fn new(base_dim: usize, order: usize, data: DVector<f64>) -> Result<Self> {
        if base_dim == 0 {
            return Err(Error::InvalidParameter("base_dim must be positive".into()));
        }
        if data.len() != base_dim * (order + 1) {
            return dim_err(format!(
                "generalized vector of base {base_dim} and order {order} needs {} entries, got {}",
                base_dim * (order + 1),
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generalized vector entry".into()));
        }
        Ok(Self { base_dim, order, data })
    }

    pub fn zeros(base_dim: usize, order: usize) -> Self {
        Self {
            base_dim,
            order,
            data: DVector::zeros(base_dim * (order + 1)),
        }
    }

    /// Zeroth-order block `v` followed by zero derivatives.
    pub fn from_value(value: &DVector<f64>, order: usize) -> Self {
        let mut out = Self::zeros(value.len(), order);
        out.data.rows_mut(0, value.len()).copy_from(value);
        out
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    /// The `k`-th derivative block.
    pub fn block(&self, k: usize) -> DVectorView<'_, f64> {
        self.data.rows(k * self.base_dim, self.base_dim)
    }
}

/// `(order+1)×(order+1)` upper shift with ones on the superdiagonal, lifted by
/// `⊗ I_{base_dim}`.
pub fn shift_matrix(order: usize, base_dim: usize) -> DMatrix<f64> {
    let size = base_dim * (order + 1);
    let mut d = DMatrix::zeros(size, size);
    for k in 0..order {
        for i in 0..base_dim {
            d[(k * base_dim + i, (k + 1) * base_dim + i)] = 1.0;
        }
    }
    d
}

/// Plant matrices lifted into generalized coordinates.
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub d_x: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub p: usize,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
}

impl LiftedSystem {
    /// `D^x − Ã`, the state Jacobian of the process prediction error.
    pub fn process_operator(&self) -> DMatrix<f64> {
        &self.d_x - &self.a_tilde
    }

    pub fn state_len(&self) -> usize {
        self.n * (self.p + 1)
    }

    pub fn output_len(&self) -> usize {
        self.m * (self.p + 1)
    }

    pub fn input_len(&self) -> usize {
        self.r * (self.d + 1)
    }
}

/// Lift `(A, B, C)` to orders `p` (states/outputs) and `d` (inputs).
///
/// `B̃` has `r·(d+1)` columns; input derivatives above order `d` are treated as
/// zero, so state blocks `k > d` receive no input contribution.
pub fn lift_system(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: usize,
    d: usize,
) -> Result<LiftedSystem> {
    let n = a.nrows();
    if n == 0 || !a.is_square() {
        return dim_err(format!("A must be square and non-empty, got {:?}", a.shape()));
    }
    if b.nrows() != n {
        return dim_err(format!("B has {} rows, expected {n}", b.nrows()));
    }
    if c.ncols() != n {
        return dim_err(format!("C has {} columns, expected {n}", c.ncols()));
    }
    let r = b.ncols();
    let m = c.nrows();
    let eye = DMatrix::<f64>::identity(p + 1, p + 1);
    let a_tilde = eye.kronecker(a);
    let c_tilde = eye.kronecker(c);
    let mut b_tilde = DMatrix::zeros(n * (p + 1), r * (d + 1));
    for k in 0..=p.min(d) {
        b_tilde.view_mut((k * n, k * r), (n, r)).copy_from(b);
    }
    Ok(LiftedSystem {
        a_tilde,
        b_tilde,
        c_tilde,
        d_x: shift_matrix(p, n),
        d_u: shift_matrix(d, r),
        p,
        d,
        n,
        m,
        r,
    })
}

/// Inverse Taylor operators for a window of `order+1` uniformly spaced
/// samples, one per evaluation position inside the window.
#[derive(Debug, Clone)]
pub struct TaylorEmbedding {
    order: usize,
    inverses: Vec<DMatrix<f64>>,
}

impl TaylorEmbedding {
    pub fn new(order: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let size = order + 1;
        let inverses = (0..size)
            .map(|offset| {
                let mut t = DMatrix::zeros(size, size);
                for i in 0..size {
                    let tau = (i as f64 - offset as f64) * dt;
                    let mut term = 1.0;
                    for j in 0..size {
                        if j > 0 {
                            term *= tau / j as f64;
                        }
                        t[(i, j)] = term;
                    }
                }
                t.try_inverse()
                    .ok_or_else(|| Error::Singular("Taylor interpolation matrix".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { order, inverses })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Index of the sample a centred window is evaluated at.
    pub fn center(&self) -> usize {
        self.order / 2
    }

    /// Inverse Taylor matrix for evaluation at window position `offset`.
    pub fn inverse(&self, offset: usize) -> &DMatrix<f64> {
        &self.inverses[offset]
    }

    /// Derivatives at the centre sample of the window.
    pub fn embed(&self, samples: &[DVector<f64>]) -> Result<GeneralizedVector> {
        self.embed_offset(samples, self.center())
    }

    /// Derivatives at window position `offset`.
    pub fn embed_offset(&self, samples: &[DVector<f64>], offset: usize) -> Result<GeneralizedVector> {
        if samples.len() != self.order + 1 {
            return dim_err(format!(
                "embedding of order {} needs {} samples, got {}",
                self.order,
                self.order + 1,
                samples.len()
            ));
        }
        if offset > self.order {
            return dim_err(format!("offset {offset} outside a window of order {}", self.order));
        }
        let base_dim = samples[0].len();
        if samples.iter().any(|s| s.len() != base_dim) {
            return dim_err("window samples differ in length");
        }
        let inverse = &self.inverses[offset];
        let mut data = DVector::zeros(base_dim * (self.order + 1));
        for j in 0..=self.order {
            let mut block = data.rows_mut(j * base_dim, base_dim);
            for (i, sample) in samples.iter().enumerate() {
                block.axpy(inverse[(j, i)], sample, 1.0);
            }
        }
        GeneralizedVector::new(base_dim, self.order, data)
    }

    /// Embed row `index` of a time-major sample matrix. The window is centred
    /// on `index` where possible and shifted inward near either end.
    pub fn embed_at(&self, seq: &DMatrix<f64>, index: usize) -> Result<GeneralizedVector> {
        let (start, offset) = window_placement(index, self.order, seq.nrows())?;
        let window: Vec<DVector<f64>> = (start..=start + self.order)
            .map(|row| seq.row(row).transpose())
            .collect();
        self.embed_offset(&window, offset)
    }
}

pub fn embed_window(samples: &[DVector<f64>], dt: f64, order: usize) -> Result<GeneralizedVector> {
    TaylorEmbedding::new(order, dt)?.embed(samples)
}

/// First row of the window used for sample `index` and the position of
/// `index` inside it.
pub fn window_placement(index: usize, order: usize, len: usize) -> Result<(usize, usize)> {
    if index >= len || len < order + 1 {
        return dim_err(format!(
            "sample {index} of {len} cannot be embedded with order {order}"
        ));
    }
    let start = index.saturating_sub(order / 2).min(len - order - 1);
    Ok((start, index - start))
}

/// Generalized prediction errors `[ε̃ʸ; ε̃ˣ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionError {
    pub eps_y: DVector<f64>,
    pub eps_x: DVector<f64>,
}

impl PredictionError {
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.eps_y.len() + self.eps_x.len());
        out.rows_mut(0, self.eps_y.len()).copy_from(&self.eps_y);
        out.rows_mut(self.eps_y.len(), self.eps_x.len()).copy_from(&self.eps_x);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.eps_y.iter().chain(self.eps_x.iter()).all(|v| v.is_finite())
    }
}

pub fn prediction_error(
    x_tilde: &GeneralizedVector,
    y_tilde: &GeneralizedVector,
    u_tilde: &GeneralizedVector,
    sys: &LiftedSystem,
) -> Result<PredictionError> {
    if x_tilde.as_vector().len() != sys.state_len() {
        return dim_err(format!(
            "x̃ has length {}, expected {}",
            x_tilde.as_vector().len(),
            sys.state_len()
        ));
    }
    if y_tilde.as_vector().len() != sys.output_len() {
        return dim_err(format!(
            "ỹ has length {}, expected {}",
            y_tilde.as_vector().len(),
            sys.output_len()
        ));
    }
    if u_tilde.as_vector().len() != sys.input_len() {
        return dim_err(format!(
            "ũ has length {}, expected {}",
            u_tilde.as_vector().len(),
            sys.input_len()
        ));
    }
    let x = x_tilde.as_vector();
    let eps_y = y_tilde.as_vector() - &sys.c_tilde * x;
    let eps_x = sys.process_operator() * x - &sys.b_tilde * u_tilde.as_vector();
    Ok(PredictionError { eps_y, eps_x })
}
