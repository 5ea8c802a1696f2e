//! Reference implementations used as oracles. They work on plain
//! column-major `Vec<f64>` buffers with explicit loops and share no code
//! with the library.
#![allow(dead_code)]

/// `½‖Y − DΨ − R‖²_F + α‖Ψ‖₁ + β‖R‖₁` with `D` as P×K, `Ψ` as K×L and
/// `Y`, `R` as P×L, all column-major.
pub fn objective(
    y: &[f64],
    d: &[f64],
    psi: &[f64],
    r: &[f64],
    (p, k, l): (usize, usize, usize),
    alpha: f64,
    beta: f64,
) -> f64 {
    let mut fit = 0.0;
    for j in 0..l {
        for i in 0..p {
            let mut v = y[j * p + i] - r[j * p + i];
            for a in 0..k {
                v -= d[a * p + i] * psi[j * k + a];
            }
            fit += v * v;
        }
    }
    let l1 = |xs: &[f64]| xs.iter().map(|x| x.abs()).sum::<f64>();
    0.5 * fit + alpha * l1(psi) + beta * l1(r)
}

fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest eigenvalue of `DᵀD` by power iteration.
fn gram_norm(d: &[f64], p: usize, k: usize) -> f64 {
    let mut v = vec![1.0; k];
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let mut dv = vec![0.0; p];
        for a in 0..k {
            for i in 0..p {
                dv[i] += d[a * p + i] * v[a];
            }
        }
        let mut w = vec![0.0; k];
        for a in 0..k {
            for i in 0..p {
                w[a] += d[a * p + i] * dv[i];
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        v = w.into_iter().map(|x| x / n).collect();
    }
    lambda
}

/// Accelerated proximal gradient (FISTA) on the joint variable `(Ψ, R)`,
/// stopped when no coordinate moves by more than `tol` or after
/// `max_iters`. Returns `(Ψ, R)`.
pub fn proximal_gradient(
    y: &[f64],
    d: &[f64],
    (p, k, l): (usize, usize, usize),
    alpha: f64,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, Vec<f64>) {
    // The smooth part's gradient is [Dᵀ; I]·(DΨ + R − Y); its Lipschitz
    // constant is λmax(DᵀD) + 1.
    let step = 1.0 / (gram_norm(d, p, k) + 1.0);
    let (mut psi, mut r) = (vec![0.0; k * l], vec![0.0; p * l]);
    let (mut psi_m, mut r_m) = (psi.clone(), r.clone());
    let mut t = 1.0f64;
    for _ in 0..max_iters {
        let mut resid = vec![0.0; p * l];
        for j in 0..l {
            for i in 0..p {
                let mut v = r_m[j * p + i] - y[j * p + i];
                for a in 0..k {
                    v += d[a * p + i] * psi_m[j * k + a];
                }
                resid[j * p + i] = v;
            }
        }
        let mut psi_next = vec![0.0; k * l];
        for j in 0..l {
            for a in 0..k {
                let mut g = 0.0;
                for i in 0..p {
                    g += d[a * p + i] * resid[j * p + i];
                }
                psi_next[j * k + a] = shrink(psi_m[j * k + a] - step * g, step * alpha);
            }
        }
        let r_next: Vec<f64> = (0..p * l)
            .map(|idx| shrink(r_m[idx] - step * resid[idx], step * beta))
            .collect();
        let moved = psi_next
            .iter()
            .zip(&psi)
            .chain(r_next.iter().zip(&r))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let w = (t - 1.0) / t_next;
        psi_m = psi_next.iter().zip(&psi).map(|(a, b)| a + w * (a - b)).collect();
        r_m = r_next.iter().zip(&r).map(|(a, b)| a + w * (a - b)).collect();
        psi = psi_next;
        r = r_next;
        t = t_next;
        if moved < tol {
            break;
        }
    }
    (psi, r)
}

/// Minimum of the scalar objective `½(y − dψ − r)² + α|ψ| + β|r|` over the
/// grid `[lo, hi]²` with the given step.
pub fn scalar_grid_min(y: f64, d: f64, alpha: f64, beta: f64, lo: f64, hi: f64, step: f64) -> (f64, f64, f64) {
    let n = ((hi - lo) / step).round() as i64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..=n {
        let psi = lo + a as f64 * step;
        let base = y - d * psi;
        let pen = alpha * psi.abs();
        for b in 0..=n {
            let r = lo + b as f64 * step;
            let e = base - r;
            let f = 0.5 * e * e + pen + beta * r.abs();
            if f < best.0 {
                best = (f, psi, r);
            }
        }
    }
    best
}

/// Trapezoidal area under precision over recall, after ordering points by
/// recall (ties keep input order).
pub fn trapezoid(mut pts: Vec<(f64, f64)>) -> f64 {
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

/// Parses a PR CSV: returns `(threshold, precision, recall)` rows and the
/// `auc` trailer value.
pub fn parse_pr_csv(text: &str) -> (Vec<(f64, f64, f64)>, f64) {
    let mut rows = Vec::new();
    let mut auc = f64::NAN;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == "auc" {
            auc = fields[1].parse().unwrap();
        } else {
            let f = |i: usize| fields[i].parse::<f64>().unwrap();
            rows.push((f(0), f(4), f(5)));
        }
    }
    (rows, auc)
}
