//! Pre-training objectives over two projected views of a batch: the
//! normalized-temperature contrastive loss, the Barlow Twins redundancy
//! loss, and their convex combination. Each returns exact gradients with
//! respect to both view matrices.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Two `N x d` views with row correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews {
    pub ori: Array2<f64>,
    pub aug: Array2<f64>,
}

impl BatchViews {
    pub fn new(ori: Array2<f64>, aug: Array2<f64>) -> Result<Self> {
        if ori.dim() != aug.dim() {
            return Err(Error::shape(format!(
                "views differ in shape: {:?} vs {:?}",
                ori.dim(),
                aug.dim()
            )));
        }
        if ori.nrows() == 0 || ori.ncols() == 0 {
            return Err(Error::Empty("batch views"));
        }
        Ok(Self { ori, aug })
    }

    pub fn batch_size(&self) -> usize {
        self.ori.nrows()
    }

    pub fn dim(&self) -> usize {
        self.ori.ncols()
    }

    pub fn swapped(&self) -> Self {
        Self {
            ori: self.aug.clone(),
            aug: self.ori.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_ori: Array2<f64>,
    pub grad_aug: Array2<f64>,
}

/// Contrastive loss averaged over all `2N` anchors.
///
/// The `2N` rows are `ori` followed by `aug`; the positive of row `i` is row
/// `i + N` (and vice versa). Each anchor's log-sum-exp over the other `2N - 1`
/// rows is computed with its largest logit subtracted.
pub fn contrastive_loss(views: &BatchViews, temperature: f64) -> Result<LossOutput> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::invalid(format!(
            "temperature must lie in (0, 1], got {temperature}"
        )));
    }
    let n = views.batch_size();
    let two_n = 2 * n;
    let z = concatenate(Axis(0), &[views.ori.view(), views.aug.view()]).expect("same width");
    let mut norms = Array1::zeros(two_n);
    let mut u = z.clone();
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        let nrm = row.dot(&row).sqrt();
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::invalid(format!(
                "row {i} of the contrastive batch has norm {nrm}"
            )));
        }
        row /= nrm;
        norms[i] = nrm;
    }
    let logits = u.dot(&u.t()) / temperature;

    let mut value = 0.0;
    // dL/dlogits
    let mut g = Array2::<f64>::zeros((two_n, two_n));
    let inv = 1.0 / two_n as f64;
    for i in 0..two_n {
        let pos = (i + n) % two_n;
        let row = logits.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (k, v) in row.iter().enumerate() {
            if k != i {
                let e = (v - max).exp();
                g[[i, k]] = e;
                sum += e;
            }
        }
        value += max + sum.ln() - row[pos];
        for k in 0..two_n {
            if k != i {
                g[[i, k]] = g[[i, k]] / sum * inv;
            }
        }
        g[[i, pos]] -= inv;
    }
    value *= inv;

    // logits = U U^T / tau  =>  dU = (G + G^T) U / tau
    let sym = (&g + &g.t()) / temperature;
    let du = sym.dot(&u);
    let mut dz = Array2::zeros((two_n, z.ncols()));
    for i in 0..two_n {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = ui.dot(&dui);
        let mut out = dz.row_mut(i);
        out.assign(&dui);
        out.scaled_add(-proj, &ui);
        out /= norms[i];
    }
    Ok(LossOutput {
        value,
        grad_ori: dz.slice(s![..n, ..]).to_owned(),
        grad_aug: dz.slice(s![n.., ..]).to_owned(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarlowOutput {
    pub loss: LossOutput,
    pub invariance: f64,
    pub redundancy: f64,
    /// The cross-correlation matrix.
    pub correlation: Array2<f64>,
    /// Set when a zero-norm feature column forced the `1e-12` guard.
    pub guarded: bool,
}

pub const BT_EPSILON: f64 = 1e-12;

/// Barlow Twins loss on the feature cross-correlation matrix:
/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_twins_loss(views: &BatchViews, lambda: f64) -> Result<BarlowOutput> {
    if views.batch_size() < 2 {
        return Err(Error::invalid("redundancy loss needs a batch of at least 2 items"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let a = &views.ori;
    let b = &views.aug;
    let d = views.dim();
    let sq_a: Vec<f64> = a.columns().into_iter().map(|c| c.dot(&c)).collect();
    let sq_b: Vec<f64> = b.columns().into_iter().map(|c| c.dot(&c)).collect();
    let guarded = sq_a.iter().chain(&sq_b).any(|s| *s == 0.0);
    if guarded {
        log::warn!("zero-norm feature column in redundancy loss; adding {BT_EPSILON} to denominators");
    }
    let na: Vec<f64> = sq_a.iter().map(|s| s.sqrt()).collect();
    let nb: Vec<f64> = sq_b.iter().map(|s| s.sqrt()).collect();
    // denominator factors
    let fa: Vec<f64> = na.iter().map(|n| if guarded { n + BT_EPSILON } else { *n }).collect();
    let fb: Vec<f64> = nb.iter().map(|n| if guarded { n + BT_EPSILON } else { *n }).collect();

    let dot = a.t().dot(b);
    let mut c = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            // sqrt(s_i s_j) keeps C_ii exactly 1 for identical columns
            let denom = if guarded {
                fa[i] * fb[j]
            } else {
                (sq_a[i] * sq_b[j]).sqrt()
            };
            c[[i, j]] = dot[[i, j]] / denom;
        }
    }
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    // dL/dC
    let mut g = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let cij = c[[i, j]];
            if i == j {
                invariance += (1.0 - cij).powi(2);
                g[[i, j]] = -2.0 * (1.0 - cij);
            } else {
                redundancy += cij * cij;
                g[[i, j]] = 2.0 * lambda * cij;
            }
        }
    }
    let value = invariance + lambda * redundancy;

    // C_ij = D_ij / (fa_i fb_j), D = A^T B.
    // dA_bi = sum_j G_ij B_bj / (fa_i fb_j) - A_bi / (fa_i na_i) * sum_j G_ij C_ij
    let mut g_scaled = g.clone();
    for i in 0..d {
        for j in 0..d {
            g_scaled[[i, j]] /= fa[i] * fb[j];
        }
    }
    let gc = &g * &c;
    let row_gc = gc.sum_axis(Axis(1));
    let col_gc = gc.sum_axis(Axis(0));
    let mut grad_a = b.dot(&g_scaled.t());
    let mut grad_b = a.dot(&g_scaled);
    for i in 0..d {
        if na[i] > 0.0 {
            let k = row_gc[i] / (fa[i] * na[i]);
            grad_a.column_mut(i).scaled_add(-k, &a.column(i));
        }
        if nb[i] > 0.0 {
            let k = col_gc[i] / (fb[i] * nb[i]);
            grad_b.column_mut(i).scaled_add(-k, &b.column(i));
        }
    }
    Ok(BarlowOutput {
        loss: LossOutput {
            value,
            grad_ori: grad_a,
            grad_aug: grad_b,
        },
        invariance,
        redundancy,
        correlation: c,
        guarded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub total: LossOutput,
    /// Component values; `None` when the component has zero weight and was
    /// not evaluated.
    pub contrast: Option<f64>,
    pub barlow: Option<f64>,
}

/// `(1 - alpha) * contrastive + alpha * barlow_twins`.
pub fn combined_loss(views: &BatchViews, temperature: f64, lambda: f64, alpha: f64) -> Result<CombinedOutput> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let contrast = if alpha < 1.0 {
        Some(contrastive_loss(views, temperature)?)
    } else {
        None
    };
    let barlow = if alpha > 0.0 {
        Some(barlow_twins_loss(views, lambda)?.loss)
    } else {
        None
    };
    let total = match (&contrast, &barlow) {
        (Some(c), None) => c.clone(),
        (None, Some(b)) => b.clone(),
        (Some(c), Some(b)) => LossOutput {
            value: (1.0 - alpha) * c.value + alpha * b.value,
            grad_ori: &c.grad_ori * (1.0 - alpha) + &b.grad_ori * alpha,
            grad_aug: &c.grad_aug * (1.0 - alpha) + &b.grad_aug * alpha,
        },
        (None, None) => unreachable!("alpha is in [0, 1]"),
    };
    Ok(CombinedOutput {
        total,
        contrast: contrast.map(|c| c.value),
        barlow: barlow.map(|b| b.value),
    })
}
