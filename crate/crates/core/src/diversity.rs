//! Representation similarity between the feature maps of the two heads, used
//! as an optional diversity penalty.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Alpha,
    Beta,
}

/// `N × D` activations: N positions (or examples), D channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array2<f64>,
    pub source: Source,
}

impl FeatureMap {
    pub fn new(values: Array2<f64>, source: Source) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 1 {
            return Err(BeaError::InvalidArgument(format!(
                "feature map needs N >= 2 and D >= 1, got {:?}",
                values.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BeaError::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { values, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis2 {
    Rows,
    Cols,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityKind {
    LinearCka,
    CosRows,
    CosCols,
    CosBoth,
}

fn center(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean.insert_axis(Axis(0))
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn linear_cka(x: &FeatureMap, y: &FeatureMap) -> Result<f64> {
    Ok(cka_impl(x.values.view(), y.values.view(), false)?.0)
}

/// Linear CKA together with its gradient with respect to both inputs.
pub fn linear_cka_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (v, g) = cka_impl(x, y, true)?;
    let (gx, gy) = g.expect("requested");
    Ok((v, gx, gy))
}

type Grads = Option<(Array2<f64>, Array2<f64>)>;

fn cka_impl(x: ArrayView2<f64>, y: ArrayView2<f64>, want_grad: bool) -> Result<(f64, Grads)> {
    if x.nrows() != y.nrows() {
        return Err(BeaError::shape(
            format!("{} rows", x.nrows()),
            format!("{} rows", y.nrows()),
        ));
    }
    let xc = center(x);
    let yc = center(y);
    let cross = xc.t().dot(&yc);
    let gx = xc.t().dot(&xc);
    let gy = yc.t().dot(&yc);
    let s = frob2(&cross);
    let p = frob2(&gx).sqrt();
    let q = frob2(&gy).sqrt();
    if p == 0.0 || q == 0.0 {
        let grads = want_grad.then(|| (Array2::zeros(x.raw_dim()), Array2::zeros(y.raw_dim())));
        return Ok((0.0, grads));
    }
    let value = s / (p * q);
    if !want_grad {
        return Ok((value.min(1.0), None));
    }
    // d s / d Xc = 2 Yc Aᵀ, d p / d Xc = 2 Xc Gx / p; both are already centered
    let ds_dx = yc.dot(&cross.t()) * 2.0;
    let ds_dy = xc.dot(&cross) * 2.0;
    let dp_dx = xc.dot(&gx) * (2.0 / p);
    let dq_dy = yc.dot(&gy) * (2.0 / q);
    let grad_x = ds_dx / (p * q) - dp_dx * (s / (p * p * q));
    let grad_y = ds_dy / (p * q) - dq_dy * (s / (p * q * q));
    Ok((
        value.min(1.0),
        Some((center(grad_x.view()), center(grad_y.view()))),
    ))
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> (f64, f64, f64) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    (a.dot(&b) / (na * nb), na, nb)
}

/// Mean cosine similarity of corresponding rows, columns, or the average of
/// the two. Zero vectors count as similarity 0.
pub fn cosine_axis_similarity(x: &FeatureMap, y: &FeatureMap, axis: Axis2) -> Result<f64> {
    Ok(cosine_impl(x.values.view(), y.values.view(), axis, false)?.0)
}

pub fn cosine_axis_similarity_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    axis: Axis2,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (v, g) = cosine_impl(x, y, axis, true)?;
    let (gx, gy) = g.expect("requested");
    Ok((v, gx, gy))
}

fn cosine_impl(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    axis: Axis2,
    want_grad: bool,
) -> Result<(f64, Grads)> {
    if x.shape() != y.shape() {
        return Err(BeaError::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let per_axis = |ax: Axis| -> (f64, Array2<f64>, Array2<f64>) {
        let n = x.len_of(ax);
        let mut gx = Array2::zeros(x.raw_dim());
        let mut gy = Array2::zeros(y.raw_dim());
        let mut total = 0.0;
        for i in 0..n {
            let a = x.index_axis(ax, i);
            let b = y.index_axis(ax, i);
            let (c, na, nb) = cosine(a, b);
            total += c;
            if want_grad && na > 0.0 && nb > 0.0 {
                let da: Array1<f64> = (&b / (na * nb) - &a * (c / (na * na))) / n as f64;
                let db: Array1<f64> = (&a / (na * nb) - &b * (c / (nb * nb))) / n as f64;
                gx.index_axis_mut(ax, i).assign(&da);
                gy.index_axis_mut(ax, i).assign(&db);
            }
        }
        (total / n as f64, gx, gy)
    };
    let (value, gx, gy) = match axis {
        Axis2::Rows => per_axis(Axis(0)),
        Axis2::Cols => per_axis(Axis(1)),
        Axis2::Both => {
            let (vr, gxr, gyr) = per_axis(Axis(0));
            let (vc, gxc, gyc) = per_axis(Axis(1));
            (0.5 * (vr + vc), (gxr + gxc) * 0.5, (gyr + gyc) * 0.5)
        }
    };
    Ok((value.clamp(-1.0, 1.0), want_grad.then_some((gx, gy))))
}

/// Similarity used as a penalty, floored at zero.
pub fn diversity_loss(x: &FeatureMap, y: &FeatureMap, kind: DiversityKind) -> Result<f64> {
    Ok(diversity_loss_grad(x.values.view(), y.values.view(), kind)?.0)
}

pub fn diversity_loss_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    kind: DiversityKind,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (v, gx, gy) = match kind {
        DiversityKind::LinearCka => linear_cka_grad(x, y)?,
        DiversityKind::CosRows => cosine_axis_similarity_grad(x, y, Axis2::Rows)?,
        DiversityKind::CosCols => cosine_axis_similarity_grad(x, y, Axis2::Cols)?,
        DiversityKind::CosBoth => cosine_axis_similarity_grad(x, y, Axis2::Both)?,
    };
    if v <= 0.0 {
        return Ok((0.0, Array2::zeros(x.raw_dim()), Array2::zeros(y.raw_dim())));
    }
    Ok((v, gx, gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(v: Array2<f64>) -> FeatureMap {
        FeatureMap::new(v, Source::Alpha).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    /// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
    pub(crate) fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
        let m = random(rng, d, d);
        let mut q = Array2::<f64>::zeros((d, d));
        for j in 0..d {
            let mut v = m.column(j).to_owned();
            for k in 0..j {
                let qk = q.column(k).to_owned();
                v = &v - &(&qk * qk.dot(&v));
            }
            let n = v.dot(&v).sqrt();
            q.column_mut(j).assign(&(v / n));
        }
        q
    }

    /// CKA through centered Gram matrices: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)).
    fn hsic_cka(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let n = x.nrows();
        let h = Array2::from_shape_fn((n, n), |(i, j)| (i == j) as u8 as f64 - 1.0 / n as f64);
        let k = x.dot(&x.t());
        let l = y.dot(&y.t());
        let hsic = |a: &Array2<f64>, b: &Array2<f64>| h.dot(a).dot(&h).dot(b).diag().sum();
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    #[test]
    fn cka_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 20, 8);
        assert_abs_diff_eq!(
            linear_cka(&fm(x.clone()), &fm(x.clone())).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let q = random_orthogonal(&mut rng, 8);
        let xq = x.dot(&q);
        assert_abs_diff_eq!(
            linear_cka(&fm(x.clone()), &fm(xq)).unwrap(),
            1.0,
            epsilon = 1e-7
        );

        let a = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0], [-1.0, -1.0]];
        assert_abs_diff_eq!(
            linear_cka(&fm(a.clone()), &fm(b.clone())).unwrap(),
            hsic_cka(&a, &b),
            epsilon = 1e-9
        );
    }

    #[test]
    fn cka_matches_hsic_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random(&mut rng, 12, 4);
            let y = random(&mut rng, 12, 6);
            assert_abs_diff_eq!(
                linear_cka(&fm(x.clone()), &fm(y.clone())).unwrap(),
                hsic_cka(&x, &y),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn cka_degenerate_and_errors() {
        let c = Array2::from_elem((5, 3), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 3);
        assert_eq!(linear_cka(&fm(c), &fm(x.clone())).unwrap(), 0.0);
        let y = random(&mut rng, 6, 3);
        assert!(linear_cka(&fm(x), &fm(y)).is_err());
        assert!(FeatureMap::new(Array2::zeros((1, 3)), Source::Beta).is_err());
    }

    #[test]
    fn cka_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = random(&mut rng, 20, 8);
            let y = random(&mut rng, 20, 8);
            let v = linear_cka(&fm(x.clone()), &fm(y.clone())).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert_abs_diff_eq!(
                v,
                linear_cka(&fm(y.clone()), &fm(x.clone())).unwrap(),
                epsilon = 1e-12
            );
            let c: f64 = rng.gen_range(-5.0..5.0);
            assert_abs_diff_eq!(
                v,
                linear_cka(&fm(&x * c + 0.0), &fm(y.clone())).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn cosine_examples() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![[1.0, 1.0], [1.0, 1.0]];
        for axis in [Axis2::Rows, Axis2::Cols, Axis2::Both] {
            assert_abs_diff_eq!(
                cosine_axis_similarity(&fm(y.clone()), &fm(y.clone()), axis).unwrap(),
                1.0,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                cosine_axis_similarity(&fm(y.clone()), &fm(-&y), axis).unwrap(),
                -1.0,
                epsilon = 1e-12
            );
        }
        assert_abs_diff_eq!(
            cosine_axis_similarity(&fm(x.clone()), &fm(y.clone()), Axis2::Cols).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        let z = array![[0.0, 1.0], [0.0, 1.0]];
        // first column of z is zero: contributes 0
        assert_abs_diff_eq!(
            cosine_axis_similarity(&fm(y.clone()), &fm(z), Axis2::Cols).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert!(cosine_axis_similarity(&fm(x), &fm(Array2::ones((3, 2))), Axis2::Rows).is_err());
    }

    #[test]
    fn cosine_positive_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 4);
        let y = random(&mut rng, 6, 4);
        let base = cosine_axis_similarity(&fm(x.clone()), &fm(y.clone()), Axis2::Rows).unwrap();
        let mut xs = x.clone();
        for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
            row *= 0.5 + i as f64;
        }
        let scaled = cosine_axis_similarity(&fm(xs), &fm(y), Axis2::Rows).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-12);
    }

    #[test]
    fn diversity_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 10, 4);
        assert_abs_diff_eq!(
            diversity_loss(&fm(x.clone()), &fm(x.clone()), DiversityKind::LinearCka).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let b = array![[0.0, 1.0], [0.0, 1.0]];
        assert_eq!(
            diversity_loss(&fm(a), &fm(b), DiversityKind::CosCols).unwrap(),
            0.0
        );
        let y = random(&mut rng, 10, 4);
        let sim = cosine_axis_similarity(&fm(x.clone()), &fm(y.clone()), Axis2::Both).unwrap();
        assert_eq!(
            diversity_loss(&fm(x.clone()), &fm(y.clone()), DiversityKind::CosBoth).unwrap(),
            sim.max(0.0)
        );
        assert_eq!(
            diversity_loss(&fm(x.clone()), &fm(y.clone()), DiversityKind::LinearCka).unwrap(),
            linear_cka(&fm(x), &fm(y)).unwrap()
        );
    }

    #[test]
    fn diversity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kinds = [
            DiversityKind::LinearCka,
            DiversityKind::CosRows,
            DiversityKind::CosCols,
            DiversityKind::CosBoth,
        ];
        for kind in kinds {
            for _ in 0..5 {
                // positive entries keep cosine similarities away from the zero floor
                let x = random(&mut rng, 6, 3).mapv(|v| v + 1.2);
                let y = random(&mut rng, 6, 3).mapv(|v| v + 1.2);
                let (_, gx, gy) = diversity_loss_grad(x.view(), y.view(), kind).unwrap();
                let f = |a: &Array2<f64>, b: &Array2<f64>| {
                    diversity_loss_grad(a.view(), b.view(), kind).unwrap().0
                };
                let h = 1e-5;
                for idx in ndarray::indices(x.raw_dim()) {
                    for which in 0..2 {
                        let (mut xp, mut xm, mut yp, mut ym) =
                            (x.clone(), x.clone(), y.clone(), y.clone());
                        if which == 0 {
                            xp[idx] += h;
                            xm[idx] -= h;
                        } else {
                            yp[idx] += h;
                            ym[idx] -= h;
                        }
                        let fd = (f(&xp, &yp) - f(&xm, &ym)) / (2.0 * h);
                        let an = if which == 0 { gx[idx] } else { gy[idx] };
                        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
                        assert!(rel < 1e-4, "{kind:?} {idx:?}: {an} vs {fd}");
                    }
                }
            }
        }
    }
}
