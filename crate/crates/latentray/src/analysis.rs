//! Latent-space statistics and editing: two-class linear discriminant fits,
//! direction extraction, latent translations, and quantitative evaluation of
//! edits via a cardiothoracic-ratio measurement oracle.

use crate::data::Image;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::losses::{self, SsimConfig};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// A fitted two-class linear discriminant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdaModel {
    /// Unit-norm discriminant direction, oriented so class-1 projections
    /// exceed class-0.
    pub direction: Vec<f64>,
    pub class_means_projected: (f64, f64),
    pub class_stds_projected: (f64, f64),
    /// Midpoint of the projected class means.
    pub threshold: f64,
    /// Whether the within-class scatter needed ridge regularization.
    pub regularized: bool,
}

/// Closed-form two-class LDA: direction proportional to `S_W^-1 (mu1 - mu0)`
/// with the pooled within-class scatter; near-singular scatter (n < d or
/// collinear codes) falls back to `S_W + eps*I` with
/// `eps = 1e-6 * trace(S_W) / d` and the fit is flagged as regularized.
pub fn fit_lda(codes_0: &[Array1<f64>], codes_1: &[Array1<f64>]) -> Result<LdaModel> {
    if codes_0.len() < 2 || codes_1.len() < 2 {
        return Err(Error::Input(format!(
            "each class needs at least 2 codes, got {} and {}",
            codes_0.len(),
            codes_1.len()
        )));
    }
    let d = codes_0[0].len();
    for c in codes_0.iter().chain(codes_1) {
        if c.len() != d {
            return Err(Error::Shape("codes have inconsistent dimensions".into()));
        }
    }

    let mean = |codes: &[Array1<f64>]| {
        let mut m = Array1::<f64>::zeros(d);
        for c in codes {
            m += c;
        }
        m / codes.len() as f64
    };
    let mu0 = mean(codes_0);
    let mu1 = mean(codes_1);
    let diff = &mu1 - &mu0;
    if diff.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(
            "class means coincide exactly; no discriminant direction exists".into(),
        ));
    }

    let mut scatter = Array2::<f64>::zeros((d, d));
    for (codes, mu) in [(codes_0, &mu0), (codes_1, &mu1)] {
        for c in codes {
            let centered = c - mu;
            for i in 0..d {
                for j in 0..d {
                    scatter[(i, j)] += centered[i] * centered[j];
                }
            }
        }
    }

    let n_total = codes_0.len() + codes_1.len();
    let undersampled = n_total.saturating_sub(2) < d;

    let solve = |s: &Array2<f64>| -> Option<Array1<f64>> {
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| s[(i, j)]);
        let rhs = nalgebra::DVector::from_fn(d, |i, _| diff[i]);
        m.clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .or_else(|| m.lu().solve(&rhs))
            .map(|v| Array1::from_iterator(v.iter().cloned()))
    };

    let (raw, regularized) = if undersampled {
        let mut s = scatter.clone();
        let eps = 1e-6 * s.diag().sum().max(1e-12) / d as f64;
        for i in 0..d {
            s[(i, i)] += eps;
        }
        (solve(&s), true)
    } else {
        match solve(&scatter) {
            Some(v) if v.iter().all(|x| x.is_finite()) => (Some(v), false),
            _ => {
                let mut s = scatter.clone();
                let eps = 1e-6 * s.diag().sum().max(1e-12) / d as f64;
                for i in 0..d {
                    s[(i, i)] += eps;
                }
                (solve(&s), true)
            }
        }
    };
    let mut direction = raw.ok_or_else(|| {
        Error::Degenerate("within-class scatter is singular even after regularization".into())
    })?;
    if !direction.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("discriminant solve produced non-finite values".into()));
    }

    let norm = direction.mapv(|v| v * v).sum().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("discriminant direction collapsed to zero".into()));
    }
    direction.mapv_inplace(|v| v / norm);

    // orient: class-1 projections above class-0
    let proj = |c: &Array1<f64>| c.dot(&direction);
    if proj(&mu1) < proj(&mu0) {
        direction.mapv_inplace(|v| -v);
    }

    let stats = |codes: &[Array1<f64>]| {
        let ps: Vec<f64> = codes.iter().map(|c| c.dot(&direction)).collect();
        let m = ps.iter().sum::<f64>() / ps.len() as f64;
        let var = ps.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (ps.len() - 1) as f64;
        (m, var.sqrt())
    };
    let (m0, s0) = stats(codes_0);
    let (m1, s1) = stats(codes_1);

    Ok(LdaModel {
        direction: direction.to_vec(),
        class_means_projected: (m0, m1),
        class_stds_projected: (s0, s1),
        threshold: 0.5 * (m0 + m1),
        regularized,
    })
}

/// Separation of the projected classes: `|mu1 - mu0| / ((s0 + s1) / 2)`.
pub fn separation_score(model: &LdaModel) -> Result<f64> {
    let (m0, m1) = model.class_means_projected;
    let (s0, s1) = model.class_stds_projected;
    let denom = 0.5 * (s0 + s1);
    if denom <= 0.0 {
        return Err(Error::UndefinedScore(
            "projected class spread is zero; separation is undefined".into(),
        ));
    }
    Ok((m1 - m0).abs() / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Normalized difference of two encoded images.
    Pair,
    /// Discriminant direction of a fitted two-class model.
    Lda,
}

/// A unit-norm semantic direction in W.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionVector {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl DirectionVector {
    /// Normalize a difference vector; exact zero differences are rejected.
    pub fn from_difference(diff: &Array1<f64>, provenance: Provenance) -> Result<Self> {
        let norm = diff.mapv(|v| v * v).sum().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDifference(
                "the two codes coincide exactly; direction is undefined".into(),
            ));
        }
        Ok(DirectionVector {
            values: diff.iter().map(|v| v / norm).collect(),
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_array(&self) -> Array1<f64> {
        Array1::from_vec(self.values.clone())
    }
}

/// Direction from an image pair: `v = (E(I*) - E(I)) / ||E(I*) - E(I)||`.
pub fn direction_from_pair(
    encoder: &Encoder,
    image: &Image,
    image_star: &Image,
) -> Result<DirectionVector> {
    let e_base = encoder.encode(image)?;
    let e_star = encoder.encode(image_star)?;
    let diff = &e_star.values - &e_base.values;
    DirectionVector::from_difference(&diff, Provenance::Pair)
}

/// Direction from a fitted discriminant model (already oriented so class-1
/// projections exceed class-0).
pub fn direction_from_lda(model: &LdaModel) -> DirectionVector {
    DirectionVector {
        values: model.direction.clone(),
        provenance: Provenance::Lda,
    }
}

/// A latent translation request: `w + alpha_k * v` for each strength.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub base_code: LatentCode,
    pub direction: DirectionVector,
    pub alphas: Vec<f64>,
}

/// Apply the translations, order-preserving in the strengths.
pub fn edit(request: &EditRequest) -> Result<Vec<LatentCode>> {
    let d = request.base_code.dim();
    if request.direction.dim() != d {
        return Err(Error::Shape(format!(
            "direction dimension {} does not match code dimension {d}",
            request.direction.dim()
        )));
    }
    if !request.alphas.iter().all(|a| a.is_finite()) {
        return Err(Error::Parameter("edit strengths must be finite".into()));
    }
    let v = request.direction.as_array();
    Ok(request
        .alphas
        .iter()
        .map(|&alpha| LatentCode::new_w(&request.base_code.values + &(v.mapv(|x| x * alpha))))
        .collect())
}

// ---------------------------------------------------------------------------
// Cardiothoracic-ratio measurement
// ---------------------------------------------------------------------------

/// Thresholds of the CTR oracle, fixed for determinism: the cardiac blob is
/// the brightest 4-connected central component above the 85th intensity
/// percentile; edges are refined to subpixel precision at plateau-midpoint
/// crossings; the thoracic extent is the outer dark-cavity span on the same
/// row, with "dark" separated from background at the midpoint between the
/// row's low plateau and its border intensity.
const BRIGHT_PERCENTILE: f64 = 0.85;
const MIN_BLOB_PIXELS: usize = 4;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Estimate of max cardiac width over inner thoracic width, in (0, 1).
pub fn measure_ctr(image: &Image) -> Result<f64> {
    let px = image.pixels();
    let side = image.side();
    let mut sorted: Vec<f64> = px.iter().cloned().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_bright = percentile(&sorted, BRIGHT_PERCENTILE);

    // 4-connected components of {v > t_bright}
    let mask: Vec<bool> = px.iter().map(|&v| v > t_bright).collect();
    let mut comp = vec![usize::MAX; side * side];
    let mut n_comp = 0usize;
    let mut stack = Vec::new();
    for start in 0..side * side {
        if !mask[start] || comp[start] != usize::MAX {
            continue;
        }
        stack.push(start);
        comp[start] = n_comp;
        while let Some(p) = stack.pop() {
            let (i, j) = (p / side, p % side);
            let mut push = |q: usize| {
                if mask[q] && comp[q] == usize::MAX {
                    comp[q] = n_comp;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - side);
            }
            if i + 1 < side {
                push(p + side);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < side {
                push(p + 1);
            }
        }
        n_comp += 1;
    }
    if n_comp == 0 {
        return Err(Error::Measurement("no pixels above the bright threshold".into()));
    }

    // candidate components: intersect the central half of the frame
    let lo = side / 4;
    let hi = side - side / 4;
    let mut sums = vec![0.0f64; n_comp];
    let mut counts = vec![0usize; n_comp];
    let mut central = vec![false; n_comp];
    for p in 0..side * side {
        let c = comp[p];
        if c == usize::MAX {
            continue;
        }
        sums[c] += px[(p / side, p % side)];
        counts[c] += 1;
        let (i, j) = (p / side, p % side);
        if (lo..hi).contains(&i) && (lo..hi).contains(&j) {
            central[c] = true;
        }
    }
    let blob = (0..n_comp)
        .filter(|&c| central[c] && counts[c] >= MIN_BLOB_PIXELS)
        .max_by(|&a, &b| {
            let ma = sums[a] / counts[a] as f64;
            let mb = sums[b] / counts[b] as f64;
            ma.partial_cmp(&mb).unwrap()
        })
        .ok_or_else(|| Error::Measurement("no central bright blob found".into()))?;

    // widest row of the blob
    let mut best_row = None;
    let mut best_span = 0usize;
    for i in 0..side {
        let mut l = None;
        let mut r = None;
        for j in 0..side {
            if comp[i * side + j] == blob {
                if l.is_none() {
                    l = Some(j);
                }
                r = Some(j);
            }
        }
        if let (Some(l), Some(r)) = (l, r) {
            let span = r - l + 1;
            if span > best_span {
                best_span = span;
                best_row = Some((i, l, r));
            }
        }
    }
    let (row_i, l, r) = best_row.ok_or_else(|| Error::Measurement("empty blob".into()))?;
    let row: Vec<f64> = (0..side).map(|j| px[(row_i, j)]).collect();

    // plateau levels on this row
    let mut row_sorted = row.clone();
    row_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let v_hi = percentile(&row_sorted, 0.90);
    let v_lo = percentile(&row_sorted, 0.10);
    let border: Vec<f64> = row[..3].iter().chain(row[side - 3..].iter()).cloned().collect();
    let v_bg = {
        let mut b = border;
        b.sort_by(|a, b| a.partial_cmp(b).unwrap());
        b[b.len() / 2]
    };

    let heart_mid = 0.5 * (v_hi + v_lo);
    let dark_mid = 0.5 * (v_lo + v_bg);
    if !(v_hi > heart_mid && heart_mid > v_lo) {
        return Err(Error::Measurement("row lacks a bright/dark contrast".into()));
    }

    // subpixel crossing x between columns (j, j+1) where the row passes `t`
    let crossing = |j: usize, t: f64| -> f64 {
        let a = row[j];
        let b = row[j + 1];
        if (b - a).abs() < 1e-15 {
            j as f64 + 0.5
        } else {
            j as f64 + (t - a) / (b - a)
        }
    };

    // heart edges: walk outward from the blob bounds to the mid crossings
    let mut jl = l;
    while jl > 0 && row[jl - 1] >= heart_mid {
        jl -= 1;
    }
    let left_heart = if jl == 0 { 0.0 } else { crossing(jl - 1, heart_mid) };
    let mut jr = r;
    while jr + 1 < side && row[jr + 1] >= heart_mid {
        jr += 1;
    }
    let right_heart = if jr + 1 >= side {
        (side - 1) as f64
    } else {
        crossing(jr, heart_mid)
    };
    let heart_width = right_heart - left_heart;
    if heart_width <= 0.0 {
        return Err(Error::Measurement("degenerate cardiac extent".into()));
    }

    // thoracic extent: outermost dark crossings scanning inward from the
    // borders
    let mut tl = None;
    for j in 0..side - 1 {
        if row[j] >= dark_mid && row[j + 1] < dark_mid {
            tl = Some(crossing(j, dark_mid));
            break;
        }
        if j == 0 && row[0] < dark_mid {
            tl = Some(0.0);
            break;
        }
    }
    let mut tr = None;
    for j in (1..side).rev() {
        if row[j] >= dark_mid && row[j - 1] < dark_mid {
            tr = Some(crossing(j - 1, dark_mid));
            break;
        }
        if j == side - 1 && row[side - 1] < dark_mid {
            tr = Some((side - 1) as f64);
            break;
        }
    }
    let (tl, tr) = match (tl, tr) {
        (Some(a), Some(b)) if b > a => (a, b),
        _ => {
            return Err(Error::Measurement("no dark thoracic cavity found on the cardiac row".into()))
        }
    };
    let thorax_width = tr - tl;

    let ratio = heart_width / thorax_width;
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Measurement(format!(
            "cardiac/thoracic ratio {ratio:.3} outside (0, 1)"
        )));
    }
    Ok(ratio)
}

// ---------------------------------------------------------------------------
// Edit evaluation
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Statistics for one edit strength.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaStats {
    pub alpha: f64,
    /// Mean CTR over the codes whose measurement succeeded, if any did.
    pub mean_ctr: Option<f64>,
    pub ctr_successes: usize,
    pub ctr_failures: usize,
    /// Mean SSIM between each edited render and its unedited base render.
    pub mean_ssim_to_base: f64,
}

/// Quantitative report of a latent edit sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditReport {
    pub per_alpha: Vec<AlphaStats>,
    /// Spearman rank correlation between alpha and the per-alpha mean CTR
    /// (None when fewer than two strengths have measurable CTR).
    pub spearman_alpha_ctr: Option<f64>,
    pub num_codes: usize,
    pub alphas: Vec<f64>,
}

/// Render `G(code + alpha*v)` for every (code, alpha), measure CTR and
/// SSIM-to-base, and correlate strength with mean CTR.
pub fn evaluate_edit(
    generator: &Generator,
    codes: &[LatentCode],
    direction: &DirectionVector,
    alphas: &[f64],
    ssim_cfg: &SsimConfig,
) -> Result<EditReport> {
    if codes.is_empty() || alphas.is_empty() {
        return Err(Error::Input("evaluate_edit needs codes and strengths".into()));
    }
    let bases: Vec<Image> = codes
        .iter()
        .map(|c| generator.synthesize(c))
        .collect::<Result<_>>()?;

    let mut per_alpha = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut ctrs = Vec::new();
        let mut failures = 0usize;
        let mut ssims = Vec::new();
        for (code, base) in codes.iter().zip(&bases) {
            let edited = edit(&EditRequest {
                base_code: code.clone(),
                direction: direction.clone(),
                alphas: vec![alpha],
            })?;
            let img = generator.synthesize(&edited[0])?;
            match measure_ctr(&img) {
                Ok(v) => ctrs.push(v),
                Err(_) => failures += 1,
            }
            ssims.push(losses::ssim(base, &img, ssim_cfg)?);
        }
        per_alpha.push(AlphaStats {
            alpha,
            mean_ctr: if ctrs.is_empty() {
                None
            } else {
                Some(ctrs.iter().sum::<f64>() / ctrs.len() as f64)
            },
            ctr_successes: ctrs.len(),
            ctr_failures: failures,
            mean_ssim_to_base: ssims.iter().sum::<f64>() / ssims.len() as f64,
        });
    }

    let measured: Vec<(f64, f64)> = per_alpha
        .iter()
        .filter_map(|s| s.mean_ctr.map(|c| (s.alpha, c)))
        .collect();
    let spearman_alpha_ctr = if measured.len() >= 2 {
        let (a, c): (Vec<f64>, Vec<f64>) = measured.into_iter().unzip();
        spearman(&a, &c)
    } else {
        None
    };

    Ok(EditReport {
        per_alpha,
        spearman_alpha_ctr,
        num_codes: codes.len(),
        alphas: alphas.to_vec(),
    })
}
