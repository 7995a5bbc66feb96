#![allow(dead_code)]

use rand::Rng;

use driftpolicy::Tensor64;

pub type Rows = Vec<Vec<f64>>;

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize, spread: f64) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor64 {
    Tensor64::from_rows(rows).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// `√(row softmax · column softmax)` of `−‖pᵢ − qⱼ‖/τ`, straight from the
/// definition.
fn affinity(p: &Rows, q: &Rows, tau: f64) -> Rows {
    let e: Rows = p
        .iter()
        .map(|pi| q.iter().map(|qj| (-dist(pi, qj) / tau).exp()).collect())
        .collect();
    let mut a = vec![vec![0.0; q.len()]; p.len()];
    for i in 0..p.len() {
        for j in 0..q.len() {
            let row: f64 = e[i].iter().sum();
            let col: f64 = (0..p.len()).map(|k| e[k][j]).sum();
            a[i][j] = ((e[i][j] / row) * (e[i][j] / col)).sqrt();
        }
    }
    a
}

/// Drift at one temperature on already rescaled samples.
pub fn oracle_single(x: &Rows, y: &Rows, tau: f64) -> Rows {
    let ap = affinity(x, y, tau);
    let an = affinity(x, x, tau);
    let d = x[0].len();
    let mut v = vec![vec![0.0; d]; x.len()];
    for i in 0..x.len() {
        let sp: f64 = ap[i].iter().sum();
        let sn: f64 = an[i].iter().sum();
        let z = sp + sn;
        for k in 0..d {
            let mut pull = 0.0;
            for j in 0..y.len() {
                pull += ap[i][j] * sn / z * y[j][k];
            }
            let mut push = 0.0;
            for j in 0..x.len() {
                push += an[i][j] * sp / z * x[j][k];
            }
            v[i][k] = pull - push;
        }
    }
    v
}

/// Rescale factor making the pooled mean pairwise distance `√D`.
pub fn oracle_scale(x: &Rows, y: &Rows) -> f64 {
    let pool: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            total += dist(pool[i], pool[j]);
            pairs += 1.0;
        }
    }
    (x[0].len() as f64).sqrt() / (total / pairs)
}

/// Multi-temperature field in the original units.
pub fn oracle_total(x: &Rows, y: &Rows, temps: &[f64]) -> Rows {
    let s = oracle_scale(x, y);
    let xs: Rows = x.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
    let ys: Rows = y.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
    let (n, d) = (x.len(), x[0].len());
    let mut total = vec![vec![0.0; d]; n];
    for &tau in temps {
        let v = oracle_single(&xs, &ys, tau);
        let sq: f64 = v.iter().flatten().map(|a| a * a).sum();
        let lambda = (sq / (n * d) as f64).sqrt().max(1e-12);
        for i in 0..n {
            for k in 0..d {
                total[i][k] += v[i][k] / lambda;
            }
        }
    }
    for row in &mut total {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    total
}

pub fn max_abs_diff(a: &Tensor64, b: &Rows) -> f64 {
    a.rows()
        .zip(b)
        .flat_map(|(r, o)| r.iter().zip(o).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
