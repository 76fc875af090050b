//! Exact Euclidean distance transform over a cell lattice (two separable passes,
//! lower envelope of parabolas).

/// Squared distance, in cells, from each cell center to the nearest seed cell
/// center. Cells with no seed anywhere get `f64::INFINITY`.
///
/// `seeds` is row-major with `width * height` entries.
pub fn squared_edt(width: usize, height: usize, seeds: &[bool]) -> Vec<f64> {
    assert_eq!(seeds.len(), width * height, "seed mask does not match the lattice");
    let mut out: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for iy in 0..height {
        let row = &mut out[iy * width..(iy + 1) * width];
        f[..width].copy_from_slice(row);
        envelope(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    for ix in 0..width {
        for iy in 0..height {
            f[iy] = out[iy * width + ix];
        }
        envelope(&f[..height], &mut d[..height], &mut v, &mut z);
        for iy in 0..height {
            out[iy * width + ix] = d[iy];
        }
    }
    out
}

/// One-dimensional transform `d[q] = min_p (q - p)² + f[p]`; infinite samples are skipped.
fn envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        d.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dx = q as f64 - p as f64;
        *dq = dx * dx + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(width: usize, height: usize, seeds: &[bool]) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; width * height];
        for (i, o) in out.iter_mut().enumerate() {
            let (x, y) = ((i % width) as i64, (i / width) as i64);
            for (j, _) in seeds.iter().enumerate().filter(|(_, &s)| s) {
                let (sx, sy) = ((j % width) as i64, (j / width) as i64);
                *o = o.min(((x - sx).pow(2) + (y - sy).pow(2)) as f64);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(1..25), rng.random_range(1..25));
            let density = rng.random_range(0.0..0.3);
            let seeds: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            assert_eq!(squared_edt(w, h, &seeds), brute(w, h, &seeds));
        }
    }

    #[test]
    fn no_seeds_is_infinite() {
        assert!(squared_edt(3, 2, &[false; 6]).iter().all(|d| d.is_infinite()));
    }
}
